#pragma once

#include <span>
#include <vector>

#include "siu/mask.hpp"
#include "siu/model.hpp"
#include "siu/world.hpp"

namespace siu {

struct MaskError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Mean (over answer positions) negative log-likelihood of the target tokens.
double cross_entropy(const ModelParams& params, const FinetuneExample& ex);

// Token-level mask: zeros at knowledge-contradicting positions (the alias
// tokens for ALIGN_UNSEEN, the whole answer for NEW_DESCRIPTION, nothing for
// the text-only targets). Vocabulary-level mask: zeros at the target's
// true-name token ids.
DualMask build_dual_mask(const ConceptWorld& world, const FinetuneExample& ex,
                         const ConceptSpec& target);

// One position's masked-KL contribution. ref_probs is the frozen model's
// distribution, cur_logprobs the unlearned model's log-distribution.
// term_count and clamped, when given, accumulate the number of summed (t,v)
// terms and the number of reference probabilities clamped at the 1e-12 floor.
double dmk_position_term(std::span<const double> ref_probs,
                         std::span<const double> cur_logprobs,
                         std::span<const std::uint8_t> vocab_mask,
                         long* term_count = nullptr, long* clamped = nullptr);

struct DmkResult {
  double value = 0.0;
  long term_count = 0;
  long clamped = 0;
};

// Sum over answer positions t of
//   K_S[t] * sum_v K_V[v] * P_ref(v|ctx_t) * log(P_ref(v|ctx_t)/P_cur(v|ctx_t))
DmkResult dmk_loss(const ModelParams& unlearned, const ModelParams& reference,
                   const FinetuneExample& ex, const DualMask& mask);

// alpha * cross_entropy + beta * dmk_loss
double total_loss(const ModelParams& unlearned, const ModelParams& reference,
                  const FinetuneExample& ex, const DualMask& mask,
                  const LossConfig& config);

// Gradient ascent on the original forget answers: exactly -cross_entropy.
double ga_loss(const ModelParams& params, const FinetuneExample& ex);

// ga_loss plus kl_weight times the plain, unmasked KL to the reference at
// every answer position.
double ga_kl_loss(const ModelParams& params, const ModelParams& reference,
                  const FinetuneExample& ex, double kl_weight);

// Forget-question examples answered from a fixed "not known" variant pool,
// trained with plain cross entropy.
std::vector<FinetuneExample> po_examples(const ConceptWorld& world,
                                         int concept_id, int n_rephrasings);

// The single forget-training pair plus rephrased prompt variants, answered
// with the original true name. GA and GA_KL fine-tune against these.
std::vector<FinetuneExample> forget_train_examples(const ConceptWorld& world,
                                                   int concept_id,
                                                   int n_rephrasings);

}  // namespace siu
