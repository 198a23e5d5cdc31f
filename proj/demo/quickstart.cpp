// SPDX-License-Identifier: Apache-2.0
// Generates a small cohort, compares two baselines with the embedding predictor at one
// chapter, and looks at how compact the learned embedding is.

#include <iomanip>
#include <iostream>

#include "moocembed/moocembed.hpp"

using namespace moocembed;

int main() {
  SynthConfig synth;
  synth.students = {150, 75, 75};
  const SynthOutput cohort = generate(synth);
  const Dataset ds = synth_dataset(cohort);
  std::cout << ds.size() << " students, " << cohort.events.size() << " tracked events\n";

  // Full-length training: with a few dozen epochs the embedding model is still underfit.
  const ExperimentConfig cfg;

  const std::size_t k = 8;
  const std::vector<PredictorSpec> specs = {predictor_spec(PredictorKind::LR, k),
                                            predictor_spec(PredictorKind::CNN2_FC1, k),
                                            predictor_spec(PredictorKind::EmbeddingFC, k)};
  const EvalReport report = compare(specs, ds, {k}, cfg);
  std::cout << std::fixed << std::setprecision(5);
  for (const auto& row : report.rows)
    std::cout << std::setw(12) << row.model << "  mse " << row.mean_mse << "  vs LR " << std::setprecision(1)
              << 100.0 * row.improvement << "%\n"
              << std::setprecision(5);

  // Embeddings of the chapter-k prefixes after unsupervised pre-training on everyone.
  AutoencoderSpec ae_spec;
  ae_spec.chapter = k;
  auto ae = make_autoencoder(ae_spec);
  const ChapterData data = chapter_data(ds, k);
  pretrain(*ae, data.full, cfg.pretraining);
  const Array z = embed_all(*ae, data.inputs);
  std::cout << "embedding width " << z.dim(1) << ", variance in 4 components "
            << 100.0 * retained_variance(z, 4) << "%\n";
}
