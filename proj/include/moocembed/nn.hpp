// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "numeric.hpp"
#include "rng.hpp"

namespace moocembed {

enum class Mode { train, eval };

/// A trainable tensor with its gradient accumulator.
struct Param {
  std::string name;
  std::string group = "default";
  Array value;
  Array grad;

  Param() = default;
  Param(std::string n, Array v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

using ParamRefs = std::vector<Param*>;

inline void zero_grads(const ParamRefs& ps) {
  for (Param* p : ps) p->zero_grad();
}

inline void set_group(const ParamRefs& ps, const std::string& group) {
  for (Param* p : ps) p->group = group;
}

inline std::size_t parameter_count(const ParamRefs& ps) {
  std::size_t n = 0;
  for (const Param* p : ps) n += p->value.size();
  return n;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Array glorot_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return rng_uniform(rng, std::move(shape), -limit, limit);
}

namespace detail {

/// Views a rank-2 or rank-3 array as rows of its last dimension.
inline Array as_rows(const Array& x, std::size_t width, const char* who) {
  if (x.rank() < 2 || x.dim(x.rank() - 1) != width)
    throw ShapeError(std::string(who) + ": expected trailing dimension " + std::to_string(width) +
                     ", got " + to_string(x.shape()));
  return x.reshaped({x.size() / width, width});
}

inline Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

[[noreturn]] inline void no_tape(const std::string& who) {
  throw std::logic_error(who + ": backward called without a matching forward");
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// y = x W + b applied to the last axis of a rank-2 or rank-3 input.
class Dense {
 public:
  Dense() = default;
  Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".w", glorot_uniform(rng, {in, out}, in, out)), bias(name + ".b", Array({out})) {}

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Array forward(const Array& x) {
    Array rows = detail::as_rows(x, in_features(), weight.name.c_str());
    Array y = matmul(rows, weight.value);
    const std::size_t n = y.dim(0), m = y.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) y(i, j) += bias.value(j);
    tape_ = Tape{std::move(rows), x.shape()};
    return std::move(y).reshaped(detail::with_last(x.shape(), m));
  }

  Array backward(const Array& dy) {
    if (!tape_) detail::no_tape(weight.name);
    Tape t = std::move(*tape_);
    tape_.reset();
    Array g = detail::as_rows(dy, out_features(), weight.name.c_str());
    add_inplace(weight.grad, matmul_tn(t.input, g));
    for (std::size_t i = 0; i < g.dim(0); ++i)
      for (std::size_t j = 0; j < g.dim(1); ++j) bias.grad(j) += g(i, j);
    return matmul_nt(g, weight.value).reshaped(t.shape);
  }

  void collect(ParamRefs& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Param weight;
  Param bias;

 private:
  struct Tape {
    Array input;
    Shape shape;
  };
  std::optional<Tape> tape_;
};

// ---------------------------------------------------------------------------

/// One-dimensional convolution along the sequence axis of a [B, T, C] input with zero
/// "same" padding; kernel size 1 or 3.
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel, Rng& rng)
      : kernel_(kernel), in_(in),
        weight(name + ".w", glorot_uniform(rng, {kernel * in, out}, kernel * in, kernel * out)),
        bias(name + ".b", Array({out})) {
    if (kernel != 1 && kernel != 3) throw ArgumentError("conv1d kernel size must be 1 or 3");
  }

  std::size_t kernel() const { return kernel_; }
  std::size_t out_channels() const { return weight.value.dim(1); }

  Array forward(const Array& x) {
    if (x.rank() != 3 || x.dim(2) != in_)
      throw ShapeError(weight.name + ": expected [B,T," + std::to_string(in_) + "], got " +
                       to_string(x.shape()));
    const std::size_t b = x.dim(0), t = x.dim(1);
    const std::size_t pad = (kernel_ - 1) / 2;
    Array cols({b * t, kernel_ * in_});
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t p = 0; p < t; ++p)
        for (std::size_t j = 0; j < kernel_; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(p + j) - static_cast<std::ptrdiff_t>(pad);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
          const double* from = &x(s, static_cast<std::size_t>(src), 0);
          double* to = &cols(s * t + p, j * in_);
          std::copy(from, from + in_, to);
        }
    Array y = matmul(cols, weight.value);
    const std::size_t m = out_channels();
    for (std::size_t i = 0; i < y.dim(0); ++i)
      for (std::size_t c = 0; c < m; ++c) y(i, c) += bias.value(c);
    tape_ = Tape{std::move(cols), b, t};
    return std::move(y).reshaped({b, t, m});
  }

  Array backward(const Array& dy) {
    if (!tape_) detail::no_tape(weight.name);
    Tape tp = std::move(*tape_);
    tape_.reset();
    const std::size_t m = out_channels();
    Array g = detail::as_rows(dy, m, weight.name.c_str());
    add_inplace(weight.grad, matmul_tn(tp.cols, g));
    for (std::size_t i = 0; i < g.dim(0); ++i)
      for (std::size_t c = 0; c < m; ++c) bias.grad(c) += g(i, c);
    Array dcols = matmul_nt(g, weight.value);
    Array dx({tp.b, tp.t, in_});
    const std::size_t pad = (kernel_ - 1) / 2;
    for (std::size_t s = 0; s < tp.b; ++s)
      for (std::size_t p = 0; p < tp.t; ++p)
        for (std::size_t j = 0; j < kernel_; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(p + j) - static_cast<std::ptrdiff_t>(pad);
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(tp.t)) continue;
          const double* from = &dcols(s * tp.t + p, j * in_);
          double* to = &dx(s, static_cast<std::size_t>(src), 0);
          for (std::size_t c = 0; c < in_; ++c) to[c] += from[c];
        }
    return dx;
  }

  void collect(ParamRefs& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

 private:
  std::size_t kernel_ = 1;
  std::size_t in_ = 0;

 public:
  Param weight;
  Param bias;

 private:
  struct Tape {
    Array cols;
    std::size_t b, t;
  };
  std::optional<Tape> tape_;
};

// ---------------------------------------------------------------------------

enum class ActivationKind { identity, sigmoid, tanh, relu };

class Activation {
 public:
  explicit Activation(ActivationKind kind = ActivationKind::identity) : kind_(kind) {}

  ActivationKind kind() const { return kind_; }

  Array forward(const Array& x) {
    Array y = x;
    switch (kind_) {
      case ActivationKind::identity: break;
      case ActivationKind::sigmoid:
        for (auto& v : y.data()) v = sigmoid(v);
        break;
      case ActivationKind::tanh:
        for (auto& v : y.data()) v = std::tanh(v);
        break;
      case ActivationKind::relu:
        for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
        break;
    }
    tape_ = y;
    return y;
  }

  Array backward(const Array& dy) {
    if (!tape_) detail::no_tape("activation");
    Array y = std::move(*tape_);
    tape_.reset();
    if (y.size() != dy.size()) throw ShapeError("activation backward: gradient shape mismatch");
    Array dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      switch (kind_) {
        case ActivationKind::identity: break;
        case ActivationKind::sigmoid: dx[i] *= y[i] * (1.0 - y[i]); break;
        case ActivationKind::tanh: dx[i] *= 1.0 - y[i] * y[i]; break;
        case ActivationKind::relu: dx[i] = y[i] > 0.0 ? dx[i] : 0.0; break;
      }
    }
    return dx;
  }

 private:
  ActivationKind kind_;
  std::optional<Array> tape_;
};

// ---------------------------------------------------------------------------

/// Inverted dropout: scales kept units by 1/(1-rate) in training, identity in eval.
class Dropout {
 public:
  explicit Dropout(double rate = 0.0) : rate_(rate) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("dropout rate must lie in [0,1)");
  }

  double rate() const { return rate_; }

  Array forward(const Array& x, Mode mode, Rng& rng) {
    if (mode == Mode::eval || rate_ == 0.0) {
      tape_ = Array();
      return x;
    }
    Array mask(x.shape());
    const double keep = 1.0 / (1.0 - rate_);
    for (auto& m : mask.data()) m = rng.uniform() < rate_ ? 0.0 : keep;
    Array y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
    tape_ = std::move(mask);
    return y;
  }

  Array backward(const Array& dy) {
    if (!tape_) detail::no_tape("dropout");
    Array mask = std::move(*tape_);
    tape_.reset();
    if (mask.empty()) return dy;
    Array dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask[i];
    return dx;
  }

 private:
  double rate_;
  std::optional<Array> tape_;
};

// ---------------------------------------------------------------------------

/// Standard LSTM: sigmoid input/forget/output gates, tanh candidate and output squashing,
/// no peepholes. Gate blocks in the weight columns are ordered [i, f, g, o].
class Lstm {
 public:
  struct Result {
    Array sequence;  // [B, T, H], indexed by input position
    Array h_last;    // [B, H]
    Array c_last;    // [B, H]
  };

  struct Grads {
    Array dx;   // [B, T, in]
    Array dh0;  // [B, H]
    Array dc0;  // [B, H]
  };

  Lstm() = default;
  /// With `reverse` the sequence is consumed from the last position to the first.
  Lstm(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng, bool reverse = false)
      : hidden_(hidden), in_(in), reverse_(reverse),
        wx(name + ".wx", glorot_uniform(rng, {in, 4 * hidden}, in, 4 * hidden)),
        wh(name + ".wh", glorot_uniform(rng, {hidden, 4 * hidden}, hidden, 4 * hidden)),
        bias(name + ".b", Array({4 * hidden})) {
    for (std::size_t j = hidden; j < 2 * hidden; ++j) bias.value(j) = 1.0;
  }

  std::size_t hidden() const { return hidden_; }
  std::size_t input_size() const { return in_; }

  Result forward(const Array& x, const Array* h0 = nullptr, const Array* c0 = nullptr) {
    if (x.rank() != 3 || x.dim(2) != in_)
      throw ShapeError(wx.name + ": expected [B,T," + std::to_string(in_) + "], got " +
                       to_string(x.shape()));
    const std::size_t b = x.dim(0), t = x.dim(1), h = hidden_;
    Array xw = matmul(x.reshaped({b * t, in_}), wx.value);  // row s*T + p

    Tape tp{x,
            Array({t, b, h}),
            Array({t, b, h}),
            Array({t, b, h}),
            Array({t, b, h}),
            Array({t, b, h}),
            Array({t + 1, b, h}),
            Array({t + 1, b, h})};
    if (h0) copy_state(*h0, tp.h, 0, b);
    if (c0) copy_state(*c0, tp.c, 0, b);

    Result r{Array({b, t, h}), Array({b, h}), Array({b, h})};
    Array hprev({b, h});
    for (std::size_t step = 0; step < t; ++step) {
      const std::size_t p = reverse_ ? t - 1 - step : step;
      for (std::size_t s = 0; s < b; ++s)
        for (std::size_t j = 0; j < h; ++j) hprev(s, j) = tp.h(step, s, j);
      Array gates = matmul(hprev, wh.value);
      for (std::size_t s = 0; s < b; ++s) {
        const double* xr = &xw(s * t + p, 0);
        double* gr = &gates(s, 0);
        for (std::size_t j = 0; j < h; ++j) {
          const double ig = sigmoid(gr[j] + xr[j] + bias.value(j));
          const double fg = sigmoid(gr[h + j] + xr[h + j] + bias.value(h + j));
          const double gg = std::tanh(gr[2 * h + j] + xr[2 * h + j] + bias.value(2 * h + j));
          const double og = sigmoid(gr[3 * h + j] + xr[3 * h + j] + bias.value(3 * h + j));
          const double c = fg * tp.c(step, s, j) + ig * gg;
          const double tc = std::tanh(c);
          const double hv = og * tc;
          tp.i(step, s, j) = ig;
          tp.f(step, s, j) = fg;
          tp.g(step, s, j) = gg;
          tp.o(step, s, j) = og;
          tp.tanh_c(step, s, j) = tc;
          tp.c(step + 1, s, j) = c;
          tp.h(step + 1, s, j) = hv;
          r.sequence(s, p, j) = hv;
        }
      }
    }
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t j = 0; j < h; ++j) {
        r.h_last(s, j) = tp.h(t, s, j);
        r.c_last(s, j) = tp.c(t, s, j);
      }
    tape_ = std::move(tp);
    return r;
  }

  /// `d_sequence` may be empty when only the final state feeds the loss; `dh_last` and
  /// `dc_last` may be null.
  Grads backward(const Array& d_sequence, const Array* dh_last = nullptr, const Array* dc_last = nullptr) {
    if (!tape_) detail::no_tape(wx.name);
    Tape tp = std::move(*tape_);
    tape_.reset();
    const std::size_t b = tp.x.dim(0), t = tp.x.dim(1), h = hidden_;
    if (!d_sequence.empty() && d_sequence.shape() != Shape{b, t, h})
      throw ShapeError(wx.name + ": output gradient shape " + to_string(d_sequence.shape()));

    Array dh_next({b, h}), dc_next({b, h});
    if (dh_last) add_inplace(dh_next, *dh_last);
    if (dc_last) add_inplace(dc_next, *dc_last);
    Array dxw({b * t, 4 * h});
    Array dgates({b, 4 * h});
    Array hprev({b, h});

    for (std::size_t step = t; step-- > 0;) {
      const std::size_t p = reverse_ ? t - 1 - step : step;
      for (std::size_t s = 0; s < b; ++s)
        for (std::size_t j = 0; j < h; ++j) {
          double dh = dh_next(s, j);
          if (!d_sequence.empty()) dh += d_sequence(s, p, j);
          const double ig = tp.i(step, s, j), fg = tp.f(step, s, j);
          const double gg = tp.g(step, s, j), og = tp.o(step, s, j);
          const double tc = tp.tanh_c(step, s, j);
          const double dc = dc_next(s, j) + dh * og * (1.0 - tc * tc);
          const double d_o = dh * tc;
          const double d_i = dc * gg;
          const double d_g = dc * ig;
          const double d_f = dc * tp.c(step, s, j);
          dc_next(s, j) = dc * fg;
          dgates(s, j) = d_i * ig * (1.0 - ig);
          dgates(s, h + j) = d_f * fg * (1.0 - fg);
          dgates(s, 2 * h + j) = d_g * (1.0 - gg * gg);
          dgates(s, 3 * h + j) = d_o * og * (1.0 - og);
          hprev(s, j) = tp.h(step, s, j);
        }
      add_inplace(wh.grad, matmul_tn(hprev, dgates));
      dh_next = matmul_nt(dgates, wh.value);
      for (std::size_t s = 0; s < b; ++s)
        std::copy(&dgates(s, 0), &dgates(s, 0) + 4 * h, &dxw(s * t + p, 0));
    }
    for (std::size_t r = 0; r < dxw.dim(0); ++r)
      for (std::size_t j = 0; j < 4 * h; ++j) bias.grad(j) += dxw(r, j);
    Array xrows = tp.x.reshaped({b * t, in_});
    add_inplace(wx.grad, matmul_tn(xrows, dxw));
    Grads g{matmul_nt(dxw, wx.value).reshaped({b, t, in_}), std::move(dh_next), std::move(dc_next)};
    return g;
  }

  void collect(ParamRefs& out) {
    out.push_back(&wx);
    out.push_back(&wh);
    out.push_back(&bias);
  }

 private:
  static void copy_state(const Array& src, Array& dst, std::size_t step, std::size_t b) {
    const std::size_t h = dst.dim(2);
    if (src.shape() != Shape{b, h}) throw ShapeError("lstm initial state shape " + to_string(src.shape()));
    std::copy(src.raw(), src.raw() + b * h, &dst(step, 0, 0));
  }

  std::size_t hidden_ = 0;
  std::size_t in_ = 0;
  bool reverse_ = false;

 public:
  Param wx;
  Param wh;
  Param bias;

 private:
  struct Tape {
    Array x;
    Array i, f, g, o, tanh_c;  // [T, B, H] in processing order
    Array h, c;                // [T+1, B, H]; index 0 is the initial state
  };
  std::optional<Tape> tape_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline Array concat_last(const Array& a, const Array& b) {
  const std::size_t rows = a.size() / a.dim(a.rank() - 1);
  const std::size_t wa = a.dim(a.rank() - 1), wb = b.dim(b.rank() - 1);
  Shape s = a.shape();
  s.back() = wa + wb;
  Array out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(a.raw() + r * wa, a.raw() + (r + 1) * wa, out.raw() + r * (wa + wb));
    std::copy(b.raw() + r * wb, b.raw() + (r + 1) * wb, out.raw() + r * (wa + wb) + wa);
  }
  return out;
}

/// Columns [from, from + width) of the last axis.
inline Array slice_last(const Array& a, std::size_t from, std::size_t width) {
  const std::size_t w = a.dim(a.rank() - 1);
  const std::size_t rows = a.size() / w;
  Shape s = a.shape();
  s.back() = width;
  Array out(s);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(a.raw() + r * w + from, a.raw() + r * w + from + width, out.raw() + r * width);
  return out;
}

}  // namespace detail

/// Forward and reverse LSTMs over the same input; outputs concatenated per position.
class BiLstm {
 public:
  BiLstm() = default;
  BiLstm(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
      : fwd(name + ".fwd", in, hidden, rng, false), bwd(name + ".bwd", in, hidden, rng, true) {}

  std::size_t hidden() const { return fwd.hidden(); }

  Array forward(const Array& x) {
    auto a = fwd.forward(x);
    auto b = bwd.forward(x);
    return detail::concat_last(a.sequence, b.sequence);
  }

  Array backward(const Array& dy) {
    const std::size_t h = hidden();
    auto ga = fwd.backward(detail::slice_last(dy, 0, h));
    auto gb = bwd.backward(detail::slice_last(dy, h, h));
    add_inplace(ga.dx, gb.dx);
    return ga.dx;
  }

  void collect(ParamRefs& out) {
    fwd.collect(out);
    bwd.collect(out);
  }

  Lstm fwd;
  Lstm bwd;
};

// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
};

/// Compares analytic gradients against central differences for every parameter entry.
///
/// `evaluate(bool with_backward)` must run the forward pass (deterministically) and return
/// the scalar loss; when `with_backward` is set it also accumulates gradients into the
/// parameters. Relative errors use max(|analytic|, |numeric|) floored at 1e-8 as denominator.
///
/// The five-point stencil has O(eps^4) truncation error, which lets deep recurrent models use
/// a step large enough that rounding noise stays well below gradients near the 1e-8 floor.
enum class Stencil { three_point, five_point };

template <class Evaluate>
GradCheckResult grad_check(const ParamRefs& params, Evaluate&& evaluate, double eps = 1e-5,
                           Stencil stencil = Stencil::three_point) {
  zero_grads(params);
  evaluate(true);
  std::vector<Array> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  GradCheckResult res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      auto at = [&](double offset) {
        p.value[i] = saved + offset;
        return evaluate(false);
      };
      double numeric = 0.0;
      if (stencil == Stencil::three_point) {
        numeric = (at(eps) - at(-eps)) / (2.0 * eps);
      } else {
        numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      }
      p.value[i] = saved;
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > res.max_relative_error) {
        res.max_relative_error = rel;
        res.worst_param = p.name;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace moocembed
