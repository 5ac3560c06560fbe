#include "siu/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace siu {
namespace {

constexpr int kMaxDecode = 8;

TokenSeq greedy(const ModelParams& params, const QAPair& qa) {
  const PseudoImage* img = qa.image ? &*qa.image : nullptr;
  return generate(params, img, qa.prompt_tokens, kMaxDecode, DecodeMode::Greedy,
                  /*stop_token=*/0);
}

// Index of the true-name slot inside a reference answer; -1 when absent.
int name_slot(const TokenSeq& answer, const TokenSeq& name) {
  if (answer.size() < name.size()) return -1;
  auto it = std::search(answer.begin(), answer.end(), name.begin(), name.end());
  if (it == answer.end()) return -1;
  return static_cast<int>(it - answer.begin());
}

}  // namespace

double efficacy(const ModelParams& unlearned, const ConceptWorld& world,
                const ForgetSet& forget, const ConceptSpec& target) {
  std::vector<QAPair> queries;
  queries.push_back(forget.train);
  // rephrased prompt variants of the one training pair: other templates and
  // dialects over the same image
  for (int tpl = 0; tpl < kNumRecognitionTemplates; ++tpl) {
    for (int d = 0; d < world.config.n_dialects; ++d) {
      if (tpl == 0 && d == 0) continue;  // the training pair itself
      queries.push_back(make_recognition_query(world, target.id, tpl, d,
                                               kForgetTrainNoiseSeed));
    }
  }
  int ok = 0;
  for (const QAPair& qa : queries) {
    const TokenSeq out = greedy(unlearned, qa);
    const bool names_concept = contains_any_of(out, target.true_name);
    if (!names_concept && rule_judge(out, target) < 5.0) ++ok;
  }
  return 100.0 * ok / static_cast<double>(queries.size());
}

double exact_match(const ModelParams& unlearned, const ConceptWorld& world,
                   std::span<const QAPair> forget_test,
                   const ConceptSpec& target) {
  if (forget_test.empty())
    throw std::invalid_argument("exact_match: empty test set");
  int ok = 0;
  int total = 0;
  for (const QAPair& qa : forget_test) {
    const TokenSeq out = greedy(unlearned, qa);
    ++total;
    if (qa.kind == QAKind::YesNo) {
      // the verdict must be a denial: a NO token and no YES token
      if (contains_token(out, world.vocab.no) &&
          !contains_token(out, world.vocab.yes))
        ++ok;
    } else {
      if (!contains_any_of(out, target.true_name)) ++ok;
    }
  }
  return 100.0 * ok / static_cast<double>(total);
}

double c_dis_term(double p_base, double p_unlearned) {
  const double pb = std::max(p_base, 1e-12);
  const double pu = std::max(p_unlearned, 1e-12);
  return p_base * std::log(pb / pu);
}

double c_dis(const ModelParams& base, const ModelParams& unlearned,
             const ConceptWorld& world, std::span<const QAPair> forget_test,
             const ConceptSpec& target) {
  (void)world;
  double sum = 0.0;
  int n = 0;
  for (const QAPair& qa : forget_test) {
    if (qa.kind != QAKind::Recognition) continue;
    const int slot = name_slot(qa.answer_tokens, target.true_name);
    if (slot < 0) continue;
    const PseudoImage* img = qa.image ? &*qa.image : nullptr;
    // teacher-forced product of the name tokens' probabilities at the slot
    const TokenSeq name(qa.answer_tokens.begin() + slot,
                        qa.answer_tokens.begin() + slot +
                            static_cast<int>(target.true_name.size()));
    TokenSeq context = qa.prompt_tokens;
    context.insert(context.end(), qa.answer_tokens.begin(),
                   qa.answer_tokens.begin() + slot);
    double lp_base = 0.0, lp_unl = 0.0;
    for (double lp : token_logprobs(base, img, context, name)) lp_base += lp;
    for (double lp : token_logprobs(unlearned, img, context, name)) lp_unl += lp;
    sum += c_dis_term(std::exp(lp_base), std::exp(lp_unl));
    ++n;
  }
  if (n == 0) throw std::invalid_argument("c_dis: no recognition queries");
  return sum / n;
}

double specificity(const ModelParams& params, const ConceptWorld& world,
                   std::span<const int> forgotten_ids) {
  auto is_forgotten = [&](int c) {
    return std::find(forgotten_ids.begin(), forgotten_ids.end(), c) !=
           forgotten_ids.end();
  };
  int remaining = 0;
  for (int c = 0; c < world.config.n_concepts; ++c)
    if (!is_forgotten(c)) ++remaining;
  if (remaining < 2 && world.background.empty())
    throw std::invalid_argument(
        "specificity: needs >= 2 non-forgotten concepts or background probes");

  int total = 0;
  int hits = 0;
  for (int c = 0; c < world.config.n_concepts; ++c) {
    if (is_forgotten(c)) continue;
    const ConceptSpec& spec = world.concept_spec(c);
    for (int i = 0; i < 4; ++i) {
      const QAPair qa = make_recognition_query(
          world, c, i % kNumRecognitionTemplates, i % world.config.n_dialects,
          kProbeNoiseBase + static_cast<std::uint64_t>(1000 + 100 * c + i));
      const TokenSeq out = greedy(params, qa);
      ++total;
      if (contains_subsequence(out, spec.true_name)) ++hits;
    }
    for (int k = 0; k < 2; ++k) {
      const QAPair qa = make_factual_query(world, c, k, k, 0);
      const TokenSeq out = greedy(params, qa);
      ++total;
      if (contains_token(out, spec.facts[static_cast<std::size_t>(k)].second))
        ++hits;
    }
  }
  for (std::size_t e = 0; e < world.background.size(); ++e) {
    for (int k = 0; k < 2; ++k) {
      const QAPair qa =
          make_background_query(world, static_cast<int>(e), k, 0);
      const TokenSeq out = greedy(params, qa);
      ++total;
      if (contains_token(out,
                         world.background[e].facts[static_cast<std::size_t>(k)].second))
        ++hits;
    }
  }
  return total == 0 ? 0.0 : 100.0 * hits / static_cast<double>(total);
}

double masked_perplexity(std::span<const double> token_logprobs,
                         std::span<const std::uint8_t> masked, int vocab_size) {
  if (token_logprobs.size() != masked.size())
    throw std::invalid_argument("masked_perplexity: size mismatch");
  if (token_logprobs.empty())
    throw std::invalid_argument("masked_perplexity: empty reference");
  double nll = 0.0;
  for (std::size_t i = 0; i < token_logprobs.size(); ++i) {
    const double lp = masked[i]
                          ? -std::log(static_cast<double>(vocab_size))
                          : token_logprobs[i];
    nll -= lp;
  }
  return std::exp(nll / static_cast<double>(token_logprobs.size()));
}

double fluency(const ModelParams& params, const ConceptWorld& world,
               std::span<const QAPair> eval_pairs, const ConceptSpec* target,
               int* n_skipped) {
  double sum = 0.0;
  int n = 0;
  int skipped = 0;
  for (const QAPair& qa : eval_pairs) {
    if (qa.answer_tokens.empty()) {
      ++skipped;
      continue;
    }
    const PseudoImage* img = qa.image ? &*qa.image : nullptr;
    const std::vector<double> lp =
        token_logprobs(params, img, qa.prompt_tokens, qa.answer_tokens);
    std::vector<std::uint8_t> masked(qa.answer_tokens.size(), 0);
    if (target) {
      for (std::size_t i = 0; i < qa.answer_tokens.size(); ++i)
        if (contains_token(target->true_name, qa.answer_tokens[i]))
          masked[i] = 1;
    }
    sum += masked_perplexity(lp, masked, world.config.vocab_size);
    ++n;
  }
  if (n_skipped) *n_skipped = skipped;
  if (n == 0) return 1.0;
  return sum / n;
}

std::vector<QAPair> fluency_probe_set(const ModelParams& base,
                                      const ConceptWorld& world,
                                      int concept_id) {
  std::vector<QAPair> probes;
  const ForgetSet fs = build_forget_set(world, concept_id);
  for (const QAPair& qa : fs.test)
    if (qa.kind == QAKind::Recognition) probes.push_back(qa);
  for (int c = 0; c < world.config.n_concepts; ++c) {
    if (c == concept_id) continue;
    probes.push_back(make_recognition_query(
        world, c, c % kNumRecognitionTemplates, 0,
        kProbeNoiseBase + static_cast<std::uint64_t>(5000 + c)));
  }
  for (QAPair& qa : probes) qa.answer_tokens = greedy(base, qa);
  return probes;
}

double diversity(std::span<const TokenSeq> outputs, bool* warned) {
  if (outputs.empty()) throw std::invalid_argument("diversity: no outputs");
  bool all_empty = true;
  double sum = 0.0;
  for (const TokenSeq& out : outputs) {
    if (out.empty()) continue;
    all_empty = false;
    const std::set<Token> unique(out.begin(), out.end());
    sum += 100.0 * static_cast<double>(unique.size()) /
           static_cast<double>(out.size());
  }
  if (warned) *warned = all_empty;
  return sum / static_cast<double>(outputs.size());
}

double rule_judge(const TokenSeq& output, const ConceptSpec& target) {
  int matched = 0;
  for (Token t : target.true_name)
    if (contains_token(output, t)) ++matched;
  const double name_score =
      1.0 + 4.0 * static_cast<double>(matched) /
                static_cast<double>(target.true_name.size());
  double fact_score = 1.0;
  for (const auto& fact : target.facts)
    if (contains_token(output, fact.second)) fact_score = 3.0;
  return std::max(name_score, fact_score);
}

MetricReport evaluate_method(const ModelParams& base,
                             const ModelParams& unlearned,
                             const ConceptWorld& world,
                             const std::vector<int>& forgotten_ids,
                             int concept_id, bool keep_details) {
  const ConceptSpec& target = world.concept_spec(concept_id);
  const ForgetSet fs = build_forget_set(world, concept_id);

  MetricReport report;
  report.efficacy = efficacy(unlearned, world, fs, target);
  report.em = exact_match(unlearned, world, fs.test, target);
  report.c_dis = c_dis(base, unlearned, world, fs.test, target);
  report.specificity = specificity(unlearned, world, forgotten_ids);

  const std::vector<QAPair> probes = fluency_probe_set(base, world, concept_id);
  report.fluency = fluency(unlearned, world, probes, &target,
                           &report.n_fluency_skipped);

  // decoded outputs over the forget test and the fluency probes feed both the
  // judge and the diversity metric
  std::vector<TokenSeq> outputs;
  double judge_sum = 0.0;
  for (const QAPair& qa : fs.test) {
    TokenSeq out = greedy(unlearned, qa);
    judge_sum += rule_judge(out, target);
    if (keep_details) {
      QueryOutcome detail;
      detail.query = qa;
      detail.generated = out;
      detail.contains_concept = contains_any_of(out, target.true_name);
      detail.matched_target_phrase =
          contains_subsequence(out, target.true_name);
      report.details.push_back(std::move(detail));
    }
    outputs.push_back(std::move(out));
  }
  report.judge_score = judge_sum / static_cast<double>(fs.test.size());
  for (const QAPair& qa : probes) outputs.push_back(greedy(unlearned, qa));
  report.diversity = diversity(outputs);

  report.n_forget_train_queries = 1;
  report.n_forget_test_queries = static_cast<int>(fs.test.size());
  report.n_specificity_probes =
      6 * (world.config.n_concepts - static_cast<int>(forgotten_ids.size())) +
      2 * static_cast<int>(world.background.size());
  return report;
}

}  // namespace siu
