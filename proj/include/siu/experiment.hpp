#pragma once

#include <string>
#include <vector>

#include "siu/attacks.hpp"
#include "siu/metrics.hpp"
#include "siu/trainer.hpp"
#include "siu/world.hpp"

namespace siu {

struct ExperimentConfig {
  WorldConfig world;
  TrainConfig pretrain;  // method field ignored (plain cross entropy)
  TrainConfig unlearn;   // method overridden per run
  ModelShape model;
  std::vector<LossMethod> methods = {LossMethod::SIU, LossMethod::PO,
                                     LossMethod::GA, LossMethod::GA_KL};
  std::vector<int> concept_ids = {0};
  bool all_concepts = false;
  std::vector<int> sweep_steps = {6, 10, 15, 20, 25, 30, 35};
  std::string out_dir = "runs";
  std::uint64_t seed = 7;
  int n_trials = 3;

  static ExperimentConfig defaults();
  void validate() const;
};

std::string experiment_config_to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(const std::string& text);

struct CellResult {
  LossMethod method = LossMethod::SIU;
  int steps = 0;
  std::string concept_label;
  int trial = 0;
  MetricReport metrics;
  AttackReport attacks;
  bool failed = false;
  std::string fail_reason;
};

struct AggregateRow {
  LossMethod method = LossMethod::SIU;
  int steps = 0;
  std::string concept_label;
  int n_trials = 0;
  // column order follows the comparison-table layout:
  // efficacy, em, judge, c_dis, specificity, fluency, diversity
  double efficacy_mean = 0, efficacy_std = 0;
  double em_mean = 0, em_std = 0;
  double judge_mean = 0, judge_std = 0;
  double c_dis_mean = 0, c_dis_std = 0;
  double specificity_mean = 0, specificity_std = 0;
  double fluency_mean = 0, fluency_std = 0;
  double diversity_mean = 0, diversity_std = 0;
  double mia_suspicious_mean = 0;
  double mia_rouge_mean = 0;
  double multilingual_mean = 0;
  double multihop_mean = 0;
  int n_failed = 0;
  std::string fail_reason;
};

struct ComparisonTable {
  std::vector<AggregateRow> rows;
  std::vector<CellResult> cells;
  bool any_failed = false;
};

// Full pipeline per method x trial: build world, pretrain (gated), unlearn,
// evaluate, attack. One base model is shared by all methods of a trial.
// Run directories and the table files land under config.out_dir.
ComparisonTable run_experiment(const ExperimentConfig& config);

// run_experiment restricted to the step sweep (first trial seed); also
// writes sweep_<metric>.csv files with columns (step, method, value).
ComparisonTable sweep_steps(const ExperimentConfig& config);

// run_experiment over all concepts simultaneously.
ComparisonTable multi_concept(const ExperimentConfig& config);

// Aggregated evaluation over several simultaneously-forgotten concepts:
// per-concept forget metrics averaged, specificity measured once.
MetricReport evaluate_concept_set(const ModelParams& base,
                                  const ModelParams& unlearned,
                                  const ConceptWorld& world,
                                  const std::vector<int>& concept_ids);
AttackReport attack_concept_set(const ModelParams& base,
                                const ModelParams& unlearned,
                                const ConceptWorld& world,
                                const std::vector<int>& concept_ids);

void write_table_csv(const ComparisonTable& table, const std::string& path);
void write_table_json(const ComparisonTable& table, const std::string& path);

// "Inf" above 1e6, fixed 17-significant-digit rendering otherwise.
std::string format_metric(double value);

}  // namespace siu
