// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "config.hpp"
#include "ingest.hpp"
#include "nn.hpp"
#include "optim.hpp"

namespace moocembed {

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

enum class PredictorKind { LR, FC3, CNN2_FC1, LSTM1, CNN1_LSTM1, EmbeddingFC, EmbeddingLSTM };
enum class AutoencoderKind { ModifiedLSTMAE, SymmetricVAE, AsymmetricVAE };

inline std::string_view kind_name(PredictorKind k) {
  switch (k) {
    case PredictorKind::LR: return "LR";
    case PredictorKind::FC3: return "FC3";
    case PredictorKind::CNN2_FC1: return "CNN2-FC1";
    case PredictorKind::LSTM1: return "LSTM1";
    case PredictorKind::CNN1_LSTM1: return "CNN1-LSTM1";
    case PredictorKind::EmbeddingFC: return "EmbeddingFC";
    case PredictorKind::EmbeddingLSTM: return "EmbeddingLSTM";
  }
  return "LR";
}

inline std::string_view kind_name(AutoencoderKind k) {
  switch (k) {
    case AutoencoderKind::ModifiedLSTMAE: return "ModifiedLSTMAE";
    case AutoencoderKind::SymmetricVAE: return "SymmetricVAE";
    case AutoencoderKind::AsymmetricVAE: return "AsymmetricVAE";
  }
  return "ModifiedLSTMAE";
}

inline PredictorKind parse_predictor_kind(const std::string& s) {
  for (auto k : {PredictorKind::LR, PredictorKind::FC3, PredictorKind::CNN2_FC1, PredictorKind::LSTM1,
                 PredictorKind::CNN1_LSTM1, PredictorKind::EmbeddingFC, PredictorKind::EmbeddingLSTM})
    if (s == kind_name(k)) return k;
  throw ArgumentError("unknown predictor kind '" + s + "'");
}

inline AutoencoderKind parse_autoencoder_kind(const std::string& s) {
  for (auto k : {AutoencoderKind::ModifiedLSTMAE, AutoencoderKind::SymmetricVAE, AutoencoderKind::AsymmetricVAE})
    if (s == kind_name(k)) return k;
  throw ArgumentError("unknown autoencoder kind '" + s + "'");
}

struct AutoencoderSpec {
  AutoencoderKind kind = AutoencoderKind::ModifiedLSTMAE;
  std::size_t chapter = 2;   // k: the encoder reads chapters 1..k-1
  std::size_t chapters = 12; // N
  std::size_t features = kFeatureCount;
  /// Z. Fixed embedding length for the LSTM autoencoder; per-step width for the VAEs.
  std::size_t bottleneck = 8;
  double sigma = 3.0;
  /// Uses exp(+(k-n)^2 / 2 sigma^2) instead of exp(-(k-n)^2 / 2 sigma^2) as loss weights.
  bool positive_exponent = false;
  std::size_t conv_channels = 16;  // kernel-1 front end of the LSTM autoencoder encoder
  std::size_t decoder_hidden = 0;  // 0 means `features`
  std::size_t vae_hidden = 16;     // per-direction width of the VAE bidirectional LSTMs
  /// KL weight. The VAE loss SSE + beta * KL is the negative ELBO (times 2 sigma^2) of a Gaussian
  /// decoder with noise variance sigma^2 = beta / 2; 0.01 suits min-max scaled counts.
  double beta = 0.01;
  std::uint64_t seed = 1;

  std::size_t prefix_length() const { return chapter - 1; }
  std::size_t decoder_width() const { return decoder_hidden ? decoder_hidden : features; }

  void validate() const {
    if (chapters < 2 || chapters > kMaxChapters) throw ArgumentError("chapter count must be 2..12");
    if (chapter < 2 || chapter > chapters)
      throw ArgumentError("chapter k must satisfy 2 <= k <= N, got " + std::to_string(chapter));
    if (bottleneck == 0 || features == 0) throw ArgumentError("zero-width autoencoder");
    if (!(sigma > 0.0)) throw ArgumentError("sigma must be positive");
  }
};

struct PredictorSpec {
  PredictorKind kind = PredictorKind::LR;
  std::size_t chapter = 2;  // k: predicts y_k from x_1..x_{k-1}
  std::size_t features = kFeatureCount;
  std::size_t fc_hidden = 64;
  std::size_t conv_channels = 32;
  std::size_t lstm_hidden = 32;
  std::size_t reduce_channels = 16;  // kernel-1 conv of CNN1-LSTM1
  std::size_t head_hidden = 64;      // hidden layer of the embedding FC head
  double dropout = 0.1;
  std::uint64_t seed = 1;
  AutoencoderSpec encoder;  // embedding predictors only

  std::size_t prefix_length() const { return chapter - 1; }
  bool uses_embedding() const {
    return kind == PredictorKind::EmbeddingFC || kind == PredictorKind::EmbeddingLSTM;
  }

  std::string label() const {
    if (kind == PredictorKind::EmbeddingLSTM) return "EmbeddingLSTM(" + std::string(kind_name(encoder.kind)) + ")";
    return std::string(kind_name(kind));
  }

  void validate() const {
    if (chapter < 2 || chapter > kMaxChapters)
      throw ArgumentError("chapter k must satisfy 2 <= k <= 12, got " + std::to_string(chapter));
    if (kind == PredictorKind::EmbeddingFC && encoder.kind != AutoencoderKind::ModifiedLSTMAE)
      throw ArgumentError("EmbeddingFC needs a ModifiedLSTMAE encoder");
    if (kind == PredictorKind::EmbeddingLSTM && encoder.kind == AutoencoderKind::ModifiedLSTMAE)
      throw ArgumentError("EmbeddingLSTM needs a VAE encoder");
    if (uses_embedding()) {
      encoder.validate();
      if (encoder.chapter != chapter) throw ArgumentError("encoder and head disagree on chapter k");
    }
  }
};

/// Optimizer that goes with a model: RMSprop when it contains an LSTM layer, Adam otherwise.
inline Rule default_rule(PredictorKind k) {
  switch (k) {
    case PredictorKind::LR:
    case PredictorKind::FC3:
    case PredictorKind::CNN2_FC1: return Rule::adam;
    default: return Rule::rmsprop;
  }
}

/// Model spec documents are KeyValues: kind, chapter, widths, bottleneck (Z), sigma, seed...
/// `kind` may name a predictor or, for autoencoder-only commands, an autoencoder.
inline PredictorSpec predictor_spec_from(const KeyValues& kv, PredictorSpec s = {}) {
  if (auto k = kv.get("kind")) s.kind = parse_predictor_kind(*k);
  s.chapter = kv.get_size("chapter", s.chapter);
  s.fc_hidden = kv.get_size("fc_hidden", s.fc_hidden);
  s.conv_channels = kv.get_size("conv_channels", s.conv_channels);
  s.lstm_hidden = kv.get_size("lstm_hidden", s.lstm_hidden);
  s.reduce_channels = kv.get_size("reduce_channels", s.reduce_channels);
  s.head_hidden = kv.get_size("head_hidden", s.head_hidden);
  s.dropout = kv.get_double("dropout", s.dropout);
  s.seed = kv.get_size("seed", s.seed);
  auto& e = s.encoder;
  if (auto k = kv.get("encoder")) e.kind = parse_autoencoder_kind(*k);
  else if (s.kind == PredictorKind::EmbeddingLSTM && e.kind == AutoencoderKind::ModifiedLSTMAE)
    e.kind = AutoencoderKind::SymmetricVAE;
  if (!kv.has("bottleneck") && e.kind != AutoencoderKind::ModifiedLSTMAE && e.bottleneck == 8) e.bottleneck = 4;
  e.chapter = s.chapter;
  e.chapters = kv.get_size("chapters", e.chapters);
  e.bottleneck = kv.get_size("bottleneck", e.bottleneck);
  e.sigma = kv.get_double("sigma", e.sigma);
  e.positive_exponent = kv.get_bool("positive_exponent", e.positive_exponent);
  e.conv_channels = kv.get_size("encoder_channels", e.conv_channels);
  e.decoder_hidden = kv.get_size("decoder_hidden", e.decoder_hidden);
  e.vae_hidden = kv.get_size("vae_hidden", e.vae_hidden);
  e.beta = kv.get_double("beta", e.beta);
  e.seed = kv.get_size("encoder_seed", s.seed + 1000);
  return s;
}

/// Autoencoder spec document: kind (an autoencoder kind), chapter, chapters, bottleneck,
/// sigma, positive_exponent, encoder_channels, decoder_hidden, vae_hidden, beta, seed.
inline AutoencoderSpec autoencoder_spec_from(const KeyValues& kv, AutoencoderSpec s = {}) {
  if (auto k = kv.get("kind")) s.kind = parse_autoencoder_kind(*k);
  if (!kv.has("bottleneck") && s.kind != AutoencoderKind::ModifiedLSTMAE && s.bottleneck == 8) s.bottleneck = 4;
  s.chapter = kv.get_size("chapter", s.chapter);
  s.chapters = kv.get_size("chapters", s.chapters);
  s.bottleneck = kv.get_size("bottleneck", s.bottleneck);
  s.sigma = kv.get_double("sigma", s.sigma);
  s.positive_exponent = kv.get_bool("positive_exponent", s.positive_exponent);
  s.conv_channels = kv.get_size("encoder_channels", s.conv_channels);
  s.decoder_hidden = kv.get_size("decoder_hidden", s.decoder_hidden);
  s.vae_hidden = kv.get_size("vae_hidden", s.vae_hidden);
  s.beta = kv.get_double("beta", s.beta);
  s.seed = kv.get_size("seed", s.seed);
  return s;
}

inline PredictorSpec predictor_spec(PredictorKind kind, std::size_t chapter, std::uint64_t seed = 1) {
  PredictorSpec s;
  s.kind = kind;
  s.chapter = chapter;
  s.seed = seed;
  s.encoder.chapter = chapter;
  s.encoder.seed = seed + 1000;
  if (kind == PredictorKind::EmbeddingLSTM) {
    s.encoder.kind = AutoencoderKind::SymmetricVAE;
    s.encoder.bottleneck = 4;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// First `k - 1` rows of a full [N, F] or [B, N, F] sequence.
inline Array prefix_of(const Array& full, std::size_t k) {
  if (full.rank() == 2) return prefix_of(full.reshaped({1, full.dim(0), full.dim(1)}), k).reshaped({k - 1, full.dim(1)});
  if (full.rank() != 3 || k < 2 || k - 1 > full.dim(1))
    throw ShapeError("prefix_of: cannot take " + std::to_string(k - 1) + " rows of " + to_string(full.shape()));
  const std::size_t b = full.dim(0), n = full.dim(1), f = full.dim(2);
  Array out({b, k - 1, f});
  for (std::size_t s = 0; s < b; ++s)
    std::copy(&full(s, 0, 0), &full(s, 0, 0) + (k - 1) * f, &out(s, 0, 0));
  (void)n;
  return out;
}

/// Rows `idx` of the leading axis.
inline Array gather(const Array& x, std::span<const std::size_t> idx) {
  Shape s = x.shape();
  const std::size_t stride = x.size() / s[0];
  s[0] = idx.size();
  Array out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(x.raw() + idx[i] * stride, x.raw() + (idx[i] + 1) * stride, out.raw() + i * stride);
  return out;
}

/// Mean over the batch of (y_hat - y)^2 and its gradient with respect to y_hat.
inline double squared_loss(const Array& y_hat, const Array& y, Array* grad) {
  if (y_hat.size() != y.size()) throw ShapeError("squared_loss: prediction/label size mismatch");
  const double n = static_cast<double>(y.size());
  double loss = 0.0;
  if (grad) *grad = Array(y_hat.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y_hat[i] - y[i];
    loss += d * d;
    if (grad) (*grad)[i] = 2.0 * d / n;
  }
  return loss / n;
}

/// Gaussian position weights w_n for n = 1..N around chapter k.
inline std::vector<double> gaussian_weights(std::size_t k, std::size_t n_chapters, double sigma,
                                            bool positive_exponent = false) {
  std::vector<double> w(n_chapters);
  const double sign = positive_exponent ? 1.0 : -1.0;
  for (std::size_t n = 1; n <= n_chapters; ++n) {
    const double d = static_cast<double>(k) - static_cast<double>(n);
    w[n - 1] = std::exp(sign * d * d / (2.0 * sigma * sigma));
  }
  return w;
}

namespace detail {

inline void check_prefix(const Array& x, std::size_t rows, std::size_t features, const char* who) {
  if (x.rank() != 3 || x.dim(1) != rows || x.dim(2) != features)
    throw ShapeError(std::string(who) + ": expected prefix [B," + std::to_string(rows) + "," +
                     std::to_string(features) + "], got " + to_string(x.shape()));
}

/// Last position of a [B, T, H] sequence as [B, H].
inline Array last_step(const Array& seq) {
  const std::size_t b = seq.dim(0), t = seq.dim(1), h = seq.dim(2);
  Array out({b, h});
  for (std::size_t s = 0; s < b; ++s) std::copy(&seq(s, t - 1, 0), &seq(s, t - 1, 0) + h, &out(s, 0));
  return out;
}

inline Array flatten_batch(const Array& x) { return x.reshaped({x.dim(0), x.size() / x.dim(0)}); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Autoencoders
// ---------------------------------------------------------------------------

/// Unsupervised sequence model whose encoder reads only the k-1 chapter prefix.
class SequenceAutoencoder {
 public:
  virtual ~SequenceAutoencoder() = default;

  virtual const AutoencoderSpec& spec() const = 0;
  /// Embedding of a prefix [B, k-1, F]: [B, Z] for the LSTM autoencoder, [B, k-1, Z] for VAEs.
  virtual Array encode(const Array& prefix, Mode mode) = 0;
  /// Gradient with respect to the prefix, accumulating encoder parameter gradients.
  virtual Array encode_backward(const Array& d_embedding) = 0;
  /// Forward, loss and backward on full sequences [B, N, F]; returns the batch-mean objective.
  virtual double train_batch(const Array& full, Mode mode) = 0;
  /// Batch-mean objective without touching gradients.
  virtual double objective(const Array& full) = 0;
  /// Unweighted mean squared error over every emitted step and feature, eval mode.
  virtual double autoencoding_mse(const Array& full) = 0;
  virtual ParamRefs params() = 0;
  virtual ParamRefs encoder_params() = 0;
};

struct MlstmaeOutput {
  Array z;      // [B, Z]
  Array recon;  // [B, k-1, F], emitted order x^_{k-1} .. x^_1
  Array pred;   // [B, N-k+1, F], emitted order x^_k .. x^_N
};

/// LSTM autoencoder with a kernel-1 convolutional front end, a fixed-length embedding and two
/// teacher-forced decoders: one reconstructs the prefix in reverse, one predicts the remaining
/// chapters. Only the encoder ever sees the prefix alone.
class ModifiedLstmAutoencoder final : public SequenceAutoencoder {
 public:
  explicit ModifiedLstmAutoencoder(AutoencoderSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    Rng rng(spec_.seed);
    const std::size_t f = spec_.features, c = spec_.conv_channels, z = spec_.bottleneck;
    const std::size_t hd = spec_.decoder_width();
    enc_conv_ = Conv1d("mlstmae.enc.conv", f, c, 1, rng);
    enc_lstm_ = Lstm("mlstmae.enc.lstm", c, z, rng);
    bridge_ = Dense("mlstmae.bridge", z, f, rng);
    rec_lstm_ = Lstm("mlstmae.rec.lstm", f, hd, rng);
    rec_out_ = Dense("mlstmae.rec.out", hd, f, rng);
    pred_lstm_ = Lstm("mlstmae.pred.lstm", f, hd, rng);
    pred_out_ = Dense("mlstmae.pred.out", hd, f, rng);
  }

  const AutoencoderSpec& spec() const override { return spec_; }

  Array encode(const Array& prefix, Mode) override {
    detail::check_prefix(prefix, spec_.prefix_length(), spec_.features, "ModifiedLSTMAE encoder");
    Array a = enc_act_.forward(enc_conv_.forward(prefix));
    return enc_lstm_.forward(a).h_last;
  }

  Array encode_backward(const Array& dz) override {
    auto g = enc_lstm_.backward(Array(), &dz);
    return enc_conv_.backward(enc_act_.backward(g.dx));
  }

  /// Decoder inputs are teacher-forced from `full`; requires the full [B, N, F] sequence.
  MlstmaeOutput forward(const Array& full, Mode mode = Mode::train) {
    check_full(full);
    const std::size_t b = full.dim(0), k = spec_.chapter, n = spec_.chapters, f = spec_.features;
    MlstmaeOutput out;
    out.z = encode(prefix_of(full, k), mode);
    Array h = bridge_.forward(out.z);

    Array rec_in({b, k - 1, f});
    Array pred_in({b, n - k + 1, f});
    for (std::size_t s = 0; s < b; ++s) {
      std::copy(&h(s, 0), &h(s, 0) + f, &rec_in(s, 0, 0));
      std::copy(&h(s, 0), &h(s, 0) + f, &pred_in(s, 0, 0));
      for (std::size_t j = 1; j + 1 < k; ++j)  // x_{k-1}, ..., x_2
        std::copy(&full(s, k - 1 - j, 0), &full(s, k - 1 - j, 0) + f, &rec_in(s, j, 0));
      for (std::size_t j = 1; j <= n - k; ++j)  // x_k, ..., x_{N-1}
        std::copy(&full(s, k - 2 + j, 0), &full(s, k - 2 + j, 0) + f, &pred_in(s, j, 0));
    }
    out.recon = rec_act_.forward(rec_out_.forward(rec_lstm_.forward(rec_in).sequence));
    out.pred = pred_act_.forward(pred_out_.forward(pred_lstm_.forward(pred_in).sequence));
    return out;
  }

  /// Per-sample weighted loss sum_n w_n |x_n - x^_n|^2, averaged over the batch.
  /// With `grad_recon`/`grad_pred` the gradients of that mean are written out.
  double loss(const Array& full, const MlstmaeOutput& out, Array* grad_recon = nullptr,
              Array* grad_pred = nullptr) const {
    const std::size_t b = full.dim(0), k = spec_.chapter, n = spec_.chapters, f = spec_.features;
    const auto w = gaussian_weights(k, n, spec_.sigma, spec_.positive_exponent);
    if (grad_recon) *grad_recon = Array(out.recon.shape());
    if (grad_pred) *grad_pred = Array(out.pred.shape());
    double total = 0.0;
    const double scale = 1.0 / static_cast<double>(b);
    for (std::size_t s = 0; s < b; ++s) {
      for (std::size_t j = 0; j + 1 < k; ++j) {
        const std::size_t row = k - 2 - j;  // x^_{k-1-j}
        for (std::size_t c = 0; c < f; ++c) {
          const double d = out.recon(s, j, c) - full(s, row, c);
          total += w[row] * d * d;
          if (grad_recon) (*grad_recon)(s, j, c) = 2.0 * w[row] * d * scale;
        }
      }
      for (std::size_t j = 0; j + k <= n; ++j) {
        const std::size_t row = k - 1 + j;  // x^_{k+j}
        for (std::size_t c = 0; c < f; ++c) {
          const double d = out.pred(s, j, c) - full(s, row, c);
          total += w[row] * d * d;
          if (grad_pred) (*grad_pred)(s, j, c) = 2.0 * w[row] * d * scale;
        }
      }
    }
    return total * scale;
  }

  void backward(const Array& grad_recon, const Array& grad_pred) {
    const std::size_t b = grad_recon.dim(0), f = spec_.features;
    auto gr = rec_lstm_.backward(rec_out_.backward(rec_act_.backward(grad_recon)));
    auto gp = pred_lstm_.backward(pred_out_.backward(pred_act_.backward(grad_pred)));
    Array dh({b, f});
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t c = 0; c < f; ++c) dh(s, c) = gr.dx(s, 0, c) + gp.dx(s, 0, c);
    encode_backward(bridge_.backward(dh));
  }

  double train_batch(const Array& full, Mode mode) override {
    auto out = forward(full, mode);
    Array gr, gp;
    const double l = loss(full, out, &gr, &gp);
    backward(gr, gp);
    return l;
  }

  double objective(const Array& full) override { return loss(full, forward(full, Mode::eval)); }

  double autoencoding_mse(const Array& full) override {
    auto out = forward(full, Mode::eval);
    const std::size_t b = full.dim(0), k = spec_.chapter, n = spec_.chapters, f = spec_.features;
    double total = 0.0;
    for (std::size_t s = 0; s < b; ++s) {
      for (std::size_t j = 0; j + 1 < k; ++j)
        for (std::size_t c = 0; c < f; ++c) {
          const double d = out.recon(s, j, c) - full(s, k - 2 - j, c);
          total += d * d;
        }
      for (std::size_t j = 0; j + k <= n; ++j)
        for (std::size_t c = 0; c < f; ++c) {
          const double d = out.pred(s, j, c) - full(s, k - 1 + j, c);
          total += d * d;
        }
    }
    return total / static_cast<double>(b * n * f);
  }

  ParamRefs params() override {
    ParamRefs ps = encoder_params();
    bridge_.collect(ps);
    rec_lstm_.collect(ps);
    rec_out_.collect(ps);
    pred_lstm_.collect(ps);
    pred_out_.collect(ps);
    return ps;
  }

  ParamRefs encoder_params() override {
    ParamRefs ps;
    enc_conv_.collect(ps);
    enc_lstm_.collect(ps);
    return ps;
  }

 private:
  void check_full(const Array& full) const {
    if (full.rank() != 3 || full.dim(1) != spec_.chapters || full.dim(2) != spec_.features)
      throw ShapeError("ModifiedLSTMAE: expected full sequences [B," + std::to_string(spec_.chapters) + "," +
                       std::to_string(spec_.features) + "], got " + to_string(full.shape()));
  }

  AutoencoderSpec spec_;
  Conv1d enc_conv_;
  Activation enc_act_{ActivationKind::tanh};
  Lstm enc_lstm_;
  Dense bridge_;
  Lstm rec_lstm_;
  Dense rec_out_;
  Activation rec_act_{ActivationKind::sigmoid};
  Lstm pred_lstm_;
  Dense pred_out_;
  Activation pred_act_{ActivationKind::sigmoid};
};

/// KL(N(mu, exp(logvar)) || N(0, 1)) summed over entries.
inline double gaussian_kl(const Array& mu, const Array& logvar, Array* d_mu = nullptr, Array* d_logvar = nullptr,
                          double scale = 1.0) {
  double kl = 0.0;
  if (d_mu) *d_mu = Array(mu.shape());
  if (d_logvar) *d_logvar = Array(logvar.shape());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double ev = std::exp(logvar[i]);
    kl += 0.5 * (mu[i] * mu[i] + ev - 1.0 - logvar[i]);
    if (d_mu) (*d_mu)[i] = scale * mu[i];
    if (d_logvar) (*d_logvar)[i] = scale * 0.5 * (ev - 1.0);
  }
  return kl;
}

struct VaeOutput {
  Array mu;      // [B, k-1, Z]
  Array logvar;  // [B, k-1, Z]
  Array z;       // [B, k-1, Z]
  Array recon;   // [B, k-1, F]
};

/// Sequence VAE over the prefix with a per-step latent. The symmetric variant encodes with a
/// bidirectional LSTM, the asymmetric one with three kernel-3 convolutions (F->32->16->2Z);
/// both decode with a bidirectional LSTM.
class SequenceVae final : public SequenceAutoencoder {
 public:
  explicit SequenceVae(AutoencoderSpec spec) : spec_(std::move(spec)), rng_(Rng(spec_.seed).derive(7)) {
    spec_.validate();
    if (spec_.kind == AutoencoderKind::ModifiedLSTMAE) throw ArgumentError("SequenceVae needs a VAE kind");
    Rng rng(spec_.seed);
    const std::size_t f = spec_.features, z = spec_.bottleneck, h = spec_.vae_hidden;
    if (spec_.kind == AutoencoderKind::SymmetricVAE) {
      enc_bilstm_ = BiLstm("vae.enc.bilstm", f, h, rng);
      enc_head_ = Dense("vae.enc.head", 2 * h, 2 * z, rng);
    } else {
      conv1_ = Conv1d("vae.enc.conv1", f, 32, 3, rng);
      conv2_ = Conv1d("vae.enc.conv2", 32, 16, 3, rng);
      conv3_ = Conv1d("vae.enc.conv3", 16, 2 * z, 3, rng);
    }
    dec_bilstm_ = BiLstm("vae.dec.bilstm", z, h, rng);
    dec_out_ = Dense("vae.dec.out", 2 * h, f, rng);
  }

  const AutoencoderSpec& spec() const override { return spec_; }

  /// Embedding is the posterior mean sequence.
  Array encode(const Array& prefix, Mode) override {
    auto [mu, logvar] = encode_moments(prefix);
    (void)logvar;
    return mu;
  }

  Array encode_backward(const Array& d_mu) override {
    return encode_moments_backward(d_mu, Array(d_mu.shape()));
  }

  /// Eval mode uses z = mu; training draws z = mu + eps * exp(logvar / 2).
  VaeOutput forward(const Array& prefix, Mode mode) {
    VaeOutput out;
    std::tie(out.mu, out.logvar) = encode_moments(prefix);
    out.z = out.mu;
    eps_ = Array(out.mu.shape());
    if (mode == Mode::train) {
      for (std::size_t i = 0; i < out.z.size(); ++i) {
        eps_[i] = rng_.normal();
        out.z[i] += eps_[i] * std::exp(0.5 * out.logvar[i]);
      }
    }
    out.recon = dec_act_.forward(dec_out_.forward(dec_bilstm_.forward(out.z)));
    return out;
  }

  /// Per sample: sum of squared reconstruction errors over the prefix plus beta * KL,
  /// averaged over the batch.
  double loss_and_backward(const Array& prefix, const VaeOutput& out, bool backward) {
    const double b = static_cast<double>(prefix.dim(0));
    double rec = 0.0;
    Array d_recon(out.recon.shape());
    for (std::size_t i = 0; i < prefix.size(); ++i) {
      const double d = out.recon[i] - prefix[i];
      rec += d * d;
      d_recon[i] = 2.0 * d / b;
    }
    Array d_mu, d_lv;
    const double kl = gaussian_kl(out.mu, out.logvar, &d_mu, &d_lv, spec_.beta / b);
    if (backward) {
      Array dz = dec_bilstm_.backward(dec_out_.backward(dec_act_.backward(d_recon)));
      for (std::size_t i = 0; i < dz.size(); ++i) {
        d_mu[i] += dz[i];
        d_lv[i] += dz[i] * eps_[i] * 0.5 * std::exp(0.5 * out.logvar[i]);
      }
      encode_moments_backward(d_mu, d_lv);
    }
    return (rec + spec_.beta * kl) / b;
  }

  double train_batch(const Array& full, Mode mode) override {
    Array prefix = prefix_of(full, spec_.chapter);
    auto out = forward(prefix, mode);
    return loss_and_backward(prefix, out, true);
  }

  double objective(const Array& full) override {
    Array prefix = prefix_of(full, spec_.chapter);
    return loss_and_backward(prefix, forward(prefix, Mode::eval), false);
  }

  double autoencoding_mse(const Array& full) override {
    Array prefix = prefix_of(full, spec_.chapter);
    auto out = forward(prefix, Mode::eval);
    double total = 0.0;
    for (std::size_t i = 0; i < prefix.size(); ++i) {
      const double d = out.recon[i] - prefix[i];
      total += d * d;
    }
    return total / static_cast<double>(prefix.size());
  }

  ParamRefs params() override {
    ParamRefs ps = encoder_params();
    dec_bilstm_.collect(ps);
    dec_out_.collect(ps);
    return ps;
  }

  ParamRefs encoder_params() override {
    ParamRefs ps;
    if (spec_.kind == AutoencoderKind::SymmetricVAE) {
      enc_bilstm_.collect(ps);
      enc_head_.collect(ps);
    } else {
      conv1_.collect(ps);
      conv2_.collect(ps);
      conv3_.collect(ps);
    }
    return ps;
  }

  /// Noise stream used for reparameterization; exposed so gradient checks can pin it.
  Rng& noise() { return rng_; }

 private:
  std::pair<Array, Array> encode_moments(const Array& prefix) {
    detail::check_prefix(prefix, spec_.prefix_length(), spec_.features, "VAE encoder");
    Array stats;
    if (spec_.kind == AutoencoderKind::SymmetricVAE) {
      stats = enc_head_.forward(enc_bilstm_.forward(prefix));
    } else {
      Array a = act1_.forward(conv1_.forward(prefix));
      a = act2_.forward(conv2_.forward(a));
      stats = conv3_.forward(a);
    }
    const std::size_t z = spec_.bottleneck;
    return {detail::slice_last(stats, 0, z), detail::slice_last(stats, z, z)};
  }

  Array encode_moments_backward(const Array& d_mu, const Array& d_logvar) {
    Array d_stats = detail::concat_last(d_mu, d_logvar);
    if (spec_.kind == AutoencoderKind::SymmetricVAE) return enc_bilstm_.backward(enc_head_.backward(d_stats));
    Array g = conv3_.backward(d_stats);
    g = conv2_.backward(act2_.backward(g));
    return conv1_.backward(act1_.backward(g));
  }

  AutoencoderSpec spec_;
  Rng rng_;
  BiLstm enc_bilstm_;
  Dense enc_head_;
  Conv1d conv1_, conv2_, conv3_;
  Activation act1_{ActivationKind::relu}, act2_{ActivationKind::relu};
  BiLstm dec_bilstm_;
  Dense dec_out_;
  Activation dec_act_{ActivationKind::sigmoid};
  Array eps_;
};

inline std::unique_ptr<SequenceAutoencoder> make_autoencoder(const AutoencoderSpec& spec) {
  if (spec.kind == AutoencoderKind::ModifiedLSTMAE) return std::make_unique<ModifiedLstmAutoencoder>(spec);
  return std::make_unique<SequenceVae>(spec);
}

// ---------------------------------------------------------------------------
// Predictors
// ---------------------------------------------------------------------------

/// Maps the chapter prefix [B, k-1, F] to grades y^_k in [0, 1] of shape [B].
class Predictor {
 public:
  explicit Predictor(PredictorSpec spec) : spec_(std::move(spec)), rng_(Rng(spec_.seed).derive(3)) {
    spec_.validate();
  }
  virtual ~Predictor() = default;

  const PredictorSpec& spec() const { return spec_; }

  Array forward(const Array& prefix, Mode mode) {
    detail::check_prefix(prefix, spec_.prefix_length(), spec_.features, spec_.label().c_str());
    Array logits = forward_logits(prefix, mode);
    return out_act_.forward(logits).reshaped({prefix.dim(0)});
  }

  void backward(const Array& d_out) {
    Array d = out_act_.backward(d_out.reshaped({d_out.size(), 1}));
    backward_logits(d);
  }

  virtual ParamRefs params() = 0;

 protected:
  /// Returns [B, 1] pre-sigmoid scores.
  virtual Array forward_logits(const Array& prefix, Mode mode) = 0;
  virtual void backward_logits(const Array& d_logits) = 0;

  PredictorSpec spec_;
  Rng rng_;

 private:
  Activation out_act_{ActivationKind::sigmoid};
};

/// Single sigmoid unit on the flattened prefix.
class LinearPredictor final : public Predictor {
 public:
  explicit LinearPredictor(PredictorSpec spec) : Predictor(std::move(spec)) {
    Rng rng(spec_.seed);
    dense_ = Dense("lr.dense", spec_.prefix_length() * spec_.features, 1, rng);
  }
  ParamRefs params() override {
    ParamRefs ps;
    dense_.collect(ps);
    return ps;
  }

 protected:
  Array forward_logits(const Array& x, Mode) override { return dense_.forward(detail::flatten_batch(x)); }
  void backward_logits(const Array& d) override { dense_.backward(d); }

 private:
  Dense dense_;
};

/// Three hidden fully connected layers.
class Fc3Predictor final : public Predictor {
 public:
  explicit Fc3Predictor(PredictorSpec spec) : Predictor(std::move(spec)) {
    Rng rng(spec_.seed);
    const std::size_t in = spec_.prefix_length() * spec_.features, h = spec_.fc_hidden;
    l1_ = Dense("fc3.l1", in, h, rng);
    l2_ = Dense("fc3.l2", h, h, rng);
    l3_ = Dense("fc3.l3", h, h, rng);
    out_ = Dense("fc3.out", h, 1, rng);
    drop1_ = drop2_ = drop3_ = Dropout(spec_.dropout);
  }
  ParamRefs params() override {
    ParamRefs ps;
    for (Dense* d : {&l1_, &l2_, &l3_, &out_}) d->collect(ps);
    return ps;
  }

 protected:
  Array forward_logits(const Array& x, Mode mode) override {
    Array a = drop1_.forward(a1_.forward(l1_.forward(detail::flatten_batch(x))), mode, rng_);
    a = drop2_.forward(a2_.forward(l2_.forward(a)), mode, rng_);
    a = drop3_.forward(a3_.forward(l3_.forward(a)), mode, rng_);
    return out_.forward(a);
  }
  void backward_logits(const Array& d) override {
    Array g = out_.backward(d);
    g = l3_.backward(a3_.backward(drop3_.backward(g)));
    g = l2_.backward(a2_.backward(drop2_.backward(g)));
    l1_.backward(a1_.backward(drop1_.backward(g)));
  }

 private:
  Dense l1_, l2_, l3_, out_;
  Activation a1_{ActivationKind::relu}, a2_{ActivationKind::relu}, a3_{ActivationKind::relu};
  Dropout drop1_, drop2_, drop3_;
};

/// Two kernel-3 convolutions over the chapter axis, then one dense output layer.
class Cnn2Fc1Predictor final : public Predictor {
 public:
  explicit Cnn2Fc1Predictor(PredictorSpec spec) : Predictor(std::move(spec)) {
    Rng rng(spec_.seed);
    const std::size_t c = spec_.conv_channels;
    conv1_ = Conv1d("cnn2.conv1", spec_.features, c, 3, rng);
    conv2_ = Conv1d("cnn2.conv2", c, c, 3, rng);
    out_ = Dense("cnn2.out", spec_.prefix_length() * c, 1, rng);
    drop_ = Dropout(spec_.dropout);
  }
  ParamRefs params() override {
    ParamRefs ps;
    conv1_.collect(ps);
    conv2_.collect(ps);
    out_.collect(ps);
    return ps;
  }

 protected:
  Array forward_logits(const Array& x, Mode mode) override {
    Array a = a1_.forward(conv1_.forward(x));
    a = a2_.forward(conv2_.forward(a));
    shape_ = a.shape();
    return out_.forward(drop_.forward(detail::flatten_batch(a), mode, rng_));
  }
  void backward_logits(const Array& d) override {
    Array g = drop_.backward(out_.backward(d)).reshaped(shape_);
    g = conv2_.backward(a2_.backward(g));
    conv1_.backward(a1_.backward(g));
  }

 private:
  Conv1d conv1_, conv2_;
  Activation a1_{ActivationKind::relu}, a2_{ActivationKind::relu};
  Dropout drop_;
  Dense out_;
  Shape shape_;
};

/// One LSTM layer whose last hidden state feeds a dense sigmoid unit; with `reduce` a
/// kernel-1 convolution first shrinks the feature width (CNN1-LSTM1).
class LstmPredictor final : public Predictor {
 public:
  LstmPredictor(PredictorSpec spec, bool reduce) : Predictor(std::move(spec)), reduce_(reduce) {
    Rng rng(spec_.seed);
    std::size_t in = spec_.features;
    if (reduce_) {
      conv_ = Conv1d("lstm1.reduce", in, spec_.reduce_channels, 1, rng);
      in = spec_.reduce_channels;
    }
    lstm_ = Lstm("lstm1.lstm", in, spec_.lstm_hidden, rng);
    out_ = Dense("lstm1.out", spec_.lstm_hidden, 1, rng);
    drop_ = Dropout(spec_.dropout);
  }
  ParamRefs params() override {
    ParamRefs ps;
    if (reduce_) conv_.collect(ps);
    lstm_.collect(ps);
    out_.collect(ps);
    return ps;
  }

 protected:
  Array forward_logits(const Array& x, Mode mode) override {
    Array in = reduce_ ? act_.forward(conv_.forward(x)) : x;
    return out_.forward(drop_.forward(lstm_.forward(in).h_last, mode, rng_));
  }
  void backward_logits(const Array& d) override {
    Array dh = drop_.backward(out_.backward(d));
    auto g = lstm_.backward(Array(), &dh);
    if (reduce_) conv_.backward(act_.backward(g.dx));
  }

 private:
  bool reduce_;
  Conv1d conv_;
  Activation act_{ActivationKind::tanh};
  Lstm lstm_;
  Dropout drop_;
  Dense out_;
};

/// Supervised head on a (pre-trained) encoder. Encoder parameters are tagged with group
/// "encoder", head parameters with "head", so fine-tuning can scale their learning rates.
class EmbeddingPredictor final : public Predictor {
 public:
  EmbeddingPredictor(PredictorSpec spec, std::unique_ptr<SequenceAutoencoder> encoder)
      : Predictor(std::move(spec)), ae_(std::move(encoder)) {
    if (!ae_) throw ArgumentError("embedding predictor needs an encoder");
    const auto& es = ae_->spec();
    if (es.chapter != spec_.chapter || es.features != spec_.features)
      throw ShapeError("embedding predictor: encoder built for k=" + std::to_string(es.chapter) +
                       " but head for k=" + std::to_string(spec_.chapter));
    const bool fixed = es.kind == AutoencoderKind::ModifiedLSTMAE;
    if (fixed != (spec_.kind == PredictorKind::EmbeddingFC))
      throw ShapeError("embedding predictor: head kind does not match the encoder's embedding shape");
    Rng rng(spec_.seed);
    if (fixed) {
      hidden_ = Dense("head.hidden", es.bottleneck, spec_.head_hidden, rng);
      out_ = Dense("head.out", spec_.head_hidden, 1, rng);
    } else {
      lstm_ = Lstm("head.lstm", es.bottleneck, spec_.lstm_hidden, rng);
      out_ = Dense("head.out", spec_.lstm_hidden, 1, rng);
    }
    drop_ = Dropout(spec_.dropout);
    set_group(ae_->params(), "encoder");
    set_group(head_params(), "head");
  }

  SequenceAutoencoder& encoder() { return *ae_; }

  ParamRefs head_params() {
    ParamRefs ps;
    if (fixed()) hidden_.collect(ps);
    else lstm_.collect(ps);
    out_.collect(ps);
    return ps;
  }

  ParamRefs params() override {
    ParamRefs ps = ae_->encoder_params();
    for (Param* p : head_params()) ps.push_back(p);
    return ps;
  }

 protected:
  Array forward_logits(const Array& x, Mode mode) override {
    Array e = ae_->encode(x, mode);
    Array h = fixed() ? act_.forward(hidden_.forward(e)) : lstm_.forward(e).h_last;
    return out_.forward(drop_.forward(h, mode, rng_));
  }
  void backward_logits(const Array& d) override {
    Array dh = drop_.backward(out_.backward(d));
    Array de;
    if (fixed()) de = hidden_.backward(act_.backward(dh));
    else de = lstm_.backward(Array(), &dh).dx;
    ae_->encode_backward(de);
  }

 private:
  bool fixed() const { return ae_->spec().kind == AutoencoderKind::ModifiedLSTMAE; }

  std::unique_ptr<SequenceAutoencoder> ae_;
  Dense hidden_;
  Activation act_{ActivationKind::relu};
  Lstm lstm_;
  Dropout drop_;
  Dense out_;
};

/// Builds a predictor; embedding predictors get a freshly initialized encoder unless one is supplied.
inline std::unique_ptr<Predictor> build_predictor(const PredictorSpec& spec,
                                                  std::unique_ptr<SequenceAutoencoder> encoder = nullptr) {
  spec.validate();
  switch (spec.kind) {
    case PredictorKind::LR: return std::make_unique<LinearPredictor>(spec);
    case PredictorKind::FC3: return std::make_unique<Fc3Predictor>(spec);
    case PredictorKind::CNN2_FC1: return std::make_unique<Cnn2Fc1Predictor>(spec);
    case PredictorKind::LSTM1: return std::make_unique<LstmPredictor>(spec, false);
    case PredictorKind::CNN1_LSTM1: return std::make_unique<LstmPredictor>(spec, true);
    case PredictorKind::EmbeddingFC:
    case PredictorKind::EmbeddingLSTM:
      if (!encoder) encoder = make_autoencoder(spec.encoder);
      return std::make_unique<EmbeddingPredictor>(spec, std::move(encoder));
  }
  throw ArgumentError("unhandled predictor kind");
}

/// Eval-mode prediction for one student from the chapter prefix [k-1, F].
inline double predict(Predictor& model, const Array& prefix) {
  if (prefix.rank() != 2) throw ShapeError("predict: expected [k-1, F] prefix, got " + to_string(prefix.shape()));
  return model.forward(prefix.reshaped({1, prefix.dim(0), prefix.dim(1)}), Mode::eval)(0);
}

// ---------------------------------------------------------------------------
// Training entry points
// ---------------------------------------------------------------------------

/// Eval-mode predictions for many prefixes, batched.
inline Array predict_all(Predictor& model, const Array& inputs, std::size_t batch = 256) {
  const std::size_t n = inputs.dim(0);
  Array out({n});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    Array y = model.forward(gather(inputs, idx), Mode::eval);
    for (std::size_t i = 0; i < idx.size(); ++i) out(start + i) = y(i);
  }
  return out;
}

/// Held-out data watched for early stopping. `labels` stays empty for autoencoders.
struct Holdout {
  Array inputs;
  Array labels;
};

namespace detail {

/// Snapshot of parameter values taken whenever the holdout loss improves; restored at the end.
class BestParams {
 public:
  explicit BestParams(const ParamRefs& ps) : ps_(ps) {}
  double offer(double loss) {
    if (loss < best_) {
      best_ = loss;
      values_.clear();
      for (const Param* p : ps_) values_.push_back(p->value);
    }
    return loss;
  }
  void restore() {
    if (values_.empty()) return;
    for (std::size_t i = 0; i < ps_.size(); ++i) ps_[i]->value = values_[i];
  }

 private:
  const ParamRefs& ps_;
  double best_ = std::numeric_limits<double>::infinity();
  std::vector<Array> values_;
};

}  // namespace detail

/// Fits a predictor on prefixes [n, k-1, F] and labels [n] with squared loss.
///
/// With a holdout and `config.patience > 0`, training stops once the holdout MSE has not
/// improved for `patience` epochs and the best parameters seen are restored.
inline std::vector<double> fit_predictor(Predictor& model, const Array& inputs, const Array& labels,
                                         const TrainConfig& config, const Holdout* holdout = nullptr,
                                         const std::function<bool(std::size_t, double)>& stop = {}) {
  const ParamRefs ps = model.params();
  detail::BestParams best(ps);
  const bool watch = holdout && config.patience > 0;
  auto history = train(
      ps, inputs.dim(0), config,
      [&](std::span<const std::size_t> idx) {
        Array x = gather(inputs, idx);
        Array y = gather(labels, idx);
        Array d;
        const double l = squared_loss(model.forward(x, Mode::train), y, &d);
        model.backward(d);
        return l;
      },
      [&](std::size_t, double) {
        if (!watch) return std::numeric_limits<double>::quiet_NaN();
        return best.offer(squared_loss(predict_all(model, holdout->inputs), holdout->labels, nullptr));
      },
      stop);
  if (watch) best.restore();
  return history;
}

/// Trains an autoencoder on its unsupervised objective over full sequences [n, N, F], with
/// optional early stopping on the objective of held-out sequences.
inline std::vector<double> pretrain(SequenceAutoencoder& ae, const Array& full, const TrainConfig& config,
                                    const Holdout* holdout = nullptr) {
  const ParamRefs ps = ae.params();
  detail::BestParams best(ps);
  const bool watch = holdout && config.patience > 0;
  auto history = train(
      ps, full.dim(0), config,
      [&](std::span<const std::size_t> idx) { return ae.train_batch(gather(full, idx), Mode::train); },
      [&](std::size_t, double) {
        if (!watch) return std::numeric_limits<double>::quiet_NaN();
        return best.offer(ae.objective(holdout->inputs));
      });
  if (watch) best.restore();
  return history;
}

/// Joint supervised training of encoder and head; the encoder learning rate is scaled by
/// `encoder_multiplier` unless the config already sets a multiplier for group "encoder".
inline std::vector<double> fine_tune(EmbeddingPredictor& model, const Array& inputs, const Array& labels,
                                     TrainConfig config, double encoder_multiplier = 0.1,
                                     const Holdout* holdout = nullptr) {
  config.group_lr_multipliers.try_emplace("encoder", encoder_multiplier);
  return fit_predictor(model, inputs, labels, config, holdout);
}

/// Eval-mode embeddings flattened to [n, embedding size].
inline Array embed_all(SequenceAutoencoder& ae, const Array& prefixes, std::size_t batch = 256) {
  const std::size_t n = prefixes.dim(0);
  Array out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    Array e = ae.encode(gather(prefixes, idx), Mode::eval);
    const std::size_t width = e.size() / idx.size();
    if (out.empty()) out = Array({n, width});
    std::copy(e.raw(), e.raw() + e.size(), &out(start, 0));
  }
  return out;
}

}  // namespace moocembed
