#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "siu/losses.hpp"
#include "siu/model.hpp"
#include "siu/world.hpp"

namespace siu {

enum class OptimizerKind { Sgd, Adam };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ModelShape {
  int d_model = 24;
  int d_hidden = 64;
  int max_len = 24;
};

struct TrainConfig {
  int steps = 3000;
  int batch_size = 16;
  double learning_rate = 1e-2;
  OptimizerKind optimizer = OptimizerKind::Adam;
  AdamConfig adam;
  std::uint64_t seed = 7;
  LossConfig loss;
  ModelShape shape;
  // Restrict updates to the hidden and output layers, the toy analog of
  // adapter-style fine-tuning with a frozen vision pathway. Off for
  // pre-training, on by default for unlearning runs.
  bool adapter_only = false;

  void validate() const;
};

struct StepLog {
  int step = 0;
  double total = 0.0;
  double ce = 0.0;
  double aux = 0.0;  // dmk (SIU) / kl (GA_KL) component
};

struct RunArtifacts {
  ModelParams base;       // frozen reference, bit-identical to the input
  ModelParams unlearned;
  std::vector<StepLog> losses;
};

// Trains the base model from scratch on the corpus (plain cross entropy).
ModelParams pretrain(const ConceptWorld& world,
                     const std::vector<QAPair>& corpus,
                     const TrainConfig& config,
                     std::vector<StepLog>* log = nullptr);

// Fine-tunes a copy of base on the loss method's data over the listed
// concepts; base itself is kept frozen as the reference.
RunArtifacts unlearn(const ModelParams& base, const ConceptWorld& world,
                     const std::vector<int>& concept_ids,
                     const TrainConfig& config);

// Pretrains from the same seed on the corpus with every pair mentioning the
// concept removed and its images relabeled per the unseen-response prior.
ModelParams retrain_oracle(const ConceptWorld& world,
                           const std::vector<QAPair>& corpus, int concept_id,
                           const TrainConfig& config,
                           std::vector<StepLog>* log = nullptr);

// The corpus-filtering step behind retrain_oracle, exposed for inspection.
std::vector<QAPair> remove_concept_from_corpus(const ConceptWorld& world,
                                               const std::vector<QAPair>& corpus,
                                               int concept_id);

// Greedy recognition accuracy over held-out probe images of every concept not
// listed in `exclude`. The harness gates pre-training at 0.95.
double recognition_probe_accuracy(const ModelParams& params,
                                  const ConceptWorld& world,
                                  const std::vector<int>& exclude = {});

void write_losses_csv(const std::vector<StepLog>& log, const std::string& path);

}  // namespace siu
