#pragma once

#include <span>
#include <vector>

#include "siu/model.hpp"
#include "siu/world.hpp"

namespace siu {

struct QueryOutcome {
  QAPair query;
  TokenSeq generated;
  bool contains_concept = false;
  bool matched_target_phrase = false;
};

struct MetricReport {
  double efficacy = 0.0;     // percent
  double em = 0.0;           // percent
  double c_dis = 0.0;
  double specificity = 0.0;  // percent
  double fluency = 1.0;      // masked perplexity
  double diversity = 0.0;    // percent
  double judge_score = 1.0;  // rubric mean in [1, 5], lower = more forgotten
  int n_forget_train_queries = 0;
  int n_forget_test_queries = 0;
  int n_specificity_probes = 0;
  int n_fluency_skipped = 0;
  std::vector<QueryOutcome> details;
};

// Percent of forget-train queries (the single pair plus its rephrased prompt
// variants) whose greedy output no longer names the target.
double efficacy(const ModelParams& unlearned, const ConceptWorld& world,
                const ForgetSet& forget, const ConceptSpec& target);

// Recognition queries succeed when the output drops the true name; yes/no
// queries succeed when the output starts with NO.
double exact_match(const ModelParams& unlearned, const ConceptWorld& world,
                   std::span<const QAPair> forget_test,
                   const ConceptSpec& target);

// Mean over recognition test queries of p_base * log(p_base / p_unlearned),
// where p is the teacher-forced product of the true-name token probabilities
// at the answer's name slot. Positive when unlearning lowered the name's
// probability.
double c_dis(const ModelParams& base, const ModelParams& unlearned,
             const ConceptWorld& world, std::span<const QAPair> forget_test,
             const ConceptSpec& target);
double c_dis_term(double p_base, double p_unlearned);

// Recognition + factual accuracy (percent) over non-forgotten concepts and
// the background entities.
double specificity(const ModelParams& params, const ConceptWorld& world,
                   std::span<const int> forgotten_ids);

// Masked perplexity of reference answers under the model; positions whose
// reference token belongs to the target's name score 1/vocab_size. target
// may be null (no masking). eval_pairs' answer_tokens hold the references.
double fluency(const ModelParams& params, const ConceptWorld& world,
               std::span<const QAPair> eval_pairs, const ConceptSpec* target,
               int* n_skipped = nullptr);

// Core of the fluency computation for a single reference text.
double masked_perplexity(std::span<const double> token_logprobs,
                         std::span<const std::uint8_t> masked, int vocab_size);

// Builds the fixed fluency probe set: forget-test prompts plus non-target
// recognition probes, with the base model's greedy decodes as references.
std::vector<QAPair> fluency_probe_set(const ModelParams& base,
                                      const ConceptWorld& world,
                                      int concept_id);

// Mean over outputs of 100 * unique(output) / len(output). Empty outputs
// count as zero; warned flags the all-empty case.
double diversity(std::span<const TokenSeq> outputs, bool* warned = nullptr);

// Deterministic 1..5 rubric replacing the LLM judge: 1 when the output names
// neither the target nor its facts, 3 when facts appear without the name,
// 5 when the full true name appears; partial name overlap interpolates.
double rule_judge(const TokenSeq& output, const ConceptSpec& target);

// Aggregate evaluation of one unlearning run against one target.
MetricReport evaluate_method(const ModelParams& base,
                             const ModelParams& unlearned,
                             const ConceptWorld& world,
                             const std::vector<int>& forgotten_ids,
                             int concept_id, bool keep_details = false);

}  // namespace siu
