#include "siu/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace siu {

double cross_entropy(const ModelParams& params, const FinetuneExample& ex) {
  if (ex.target_tokens.empty())
    throw std::invalid_argument("cross_entropy: empty target");
  const PseudoImage* img = ex.image ? &*ex.image : nullptr;
  const double lp =
      sequence_logprob(params, img, ex.input_tokens, ex.target_tokens);
  return -lp / static_cast<double>(ex.target_tokens.size());
}

DualMask build_dual_mask(const ConceptWorld& world, const FinetuneExample& ex,
                         const ConceptSpec& target) {
  DualMask mask = all_ones_mask(ex.target_tokens.size(),
                                static_cast<std::size_t>(world.config.vocab_size));
  switch (ex.target_kind) {
    case TargetKind::AlignUnseen: {
      const auto alias = world.alias_for(target.id);
      bool found = false;
      for (std::size_t j = 0; j < ex.target_tokens.size(); ++j) {
        if (ex.target_tokens[j] == alias[0] || ex.target_tokens[j] == alias[1]) {
          mask.token_mask[j] = 0;
          found = true;
        }
      }
      if (!found)
        throw MaskError("alias tokens not found in ALIGN_UNSEEN answer");
      break;
    }
    case TargetKind::NewDescription:
      // the whole fabricated answer contradicts original knowledge
      std::fill(mask.token_mask.begin(), mask.token_mask.end(), 0);
      break;
    case TargetKind::DecoupleFact:
    case TargetKind::PreserveNonTarget:
    case TargetKind::BaselineAnswer:
      break;
  }
  for (Token t : target.true_name)
    mask.vocab_mask[static_cast<std::size_t>(t)] = 0;
  return mask;
}

double dmk_position_term(std::span<const double> ref_probs,
                         std::span<const double> cur_logprobs,
                         std::span<const std::uint8_t> vocab_mask,
                         long* term_count, long* clamped) {
  if (ref_probs.size() != cur_logprobs.size() ||
      ref_probs.size() != vocab_mask.size())
    throw std::invalid_argument("dmk_position_term: size mismatch");
  double term = 0.0;
  for (std::size_t v = 0; v < ref_probs.size(); ++v) {
    if (vocab_mask[v] == 0) continue;
    const double p = ref_probs[v];
    double log_p = std::log(std::max(p, 1e-12));
    if (p < 1e-12 && clamped) ++*clamped;
    term += p * (log_p - cur_logprobs[v]);
    if (term_count) ++*term_count;
  }
  return term;
}

DmkResult dmk_loss(const ModelParams& unlearned, const ModelParams& reference,
                   const FinetuneExample& ex, const DualMask& mask) {
  const auto A = ex.target_tokens.size();
  const auto V = static_cast<std::size_t>(unlearned.dims.vocab_size);
  if (mask.token_mask.size() != A || mask.vocab_mask.size() != V)
    throw std::invalid_argument("dmk_loss: mask shapes do not match example");
  const PseudoImage* img = ex.image ? &*ex.image : nullptr;
  const TokenSeq full = concat(ex.input_tokens, ex.target_tokens);

  DmkResult result;
  std::vector<double> ref_probs(V);
  // teacher-forced answer rows for both models
  const int P = static_cast<int>(ex.input_tokens.size());
  const ModelOutput cur =
      context_rows(unlearned, img, full, P, P + static_cast<int>(A));
  const ModelOutput ref =
      context_rows(reference, img, full, P, P + static_cast<int>(A));
  for (std::size_t j = 0; j < A; ++j) {
    if (mask.token_mask[j] == 0) continue;
    const auto ref_lp = ref.logprob_row(static_cast<int>(j));
    for (std::size_t v = 0; v < V; ++v) ref_probs[v] = std::exp(ref_lp[v]);
    result.value += dmk_position_term(ref_probs,
                                      cur.logprob_row(static_cast<int>(j)),
                                      mask.vocab_mask, &result.term_count,
                                      &result.clamped);
  }
  return result;
}

double total_loss(const ModelParams& unlearned, const ModelParams& reference,
                  const FinetuneExample& ex, const DualMask& mask,
                  const LossConfig& config) {
  config.validate();
  if (config.method != LossMethod::SIU)
    throw std::invalid_argument("total_loss: config.method must be SIU");
  return config.alpha * cross_entropy(unlearned, ex) +
         config.beta * dmk_loss(unlearned, reference, ex, mask).value;
}

double ga_loss(const ModelParams& params, const FinetuneExample& ex) {
  return -cross_entropy(params, ex);
}

double ga_kl_loss(const ModelParams& params, const ModelParams& reference,
                  const FinetuneExample& ex, double kl_weight) {
  const auto A = ex.target_tokens.size();
  const auto V = static_cast<std::size_t>(params.dims.vocab_size);
  DualMask full_mask = all_ones_mask(A, V);
  return ga_loss(params, ex) +
         kl_weight * dmk_loss(params, reference, ex, full_mask).value;
}

std::vector<FinetuneExample> forget_train_examples(const ConceptWorld& world,
                                                   int concept_id,
                                                   int n_rephrasings) {
  if (n_rephrasings < 1)
    throw std::invalid_argument("forget_train_examples: n_rephrasings must be >= 1");
  world.concept_spec(concept_id);
  const PseudoImage train_img =
      world.concept_image(concept_id, kForgetTrainNoiseSeed);
  std::vector<FinetuneExample> out;
  for (int r = 0; r < n_rephrasings; ++r) {
    QAPair qa = make_recognition_query(world, concept_id,
                                       r % kNumRecognitionTemplates, 0,
                                       kForgetTrainNoiseSeed);
    FinetuneExample ex;
    ex.image = train_img;
    ex.input_tokens = std::move(qa.prompt_tokens);
    ex.target_tokens = std::move(qa.answer_tokens);
    ex.target_kind = TargetKind::BaselineAnswer;
    ex.mask = all_ones_mask(ex.target_tokens.size(),
                            static_cast<std::size_t>(world.config.vocab_size));
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<FinetuneExample> po_examples(const ConceptWorld& world,
                                         int concept_id, int n_rephrasings) {
  if (n_rephrasings < 1)
    throw std::invalid_argument("po_examples: n_rephrasings must be >= 1");
  world.concept_spec(concept_id);
  using W = Vocabulary;
  const Vocabulary& v = world.vocab;
  // fixed "not known" variant pool
  const std::vector<TokenSeq> pool = {
      {v.func(0, W::kNot), v.func(0, W::kKnown), v.eos},
      {v.func(0, W::kName), v.func(0, W::kNot), v.func(0, W::kKnown), v.eos},
      {v.func(0, W::kA), v.func(0, W::kPerson), v.func(0, W::kNot),
       v.func(0, W::kKnown), v.eos},
      {v.func(0, W::kNot), v.func(0, W::kKnown), v.func(0, W::kWho),
       v.func(0, W::kThis), v.func(0, W::kIs), v.eos},
  };
  const PseudoImage train_img =
      world.concept_image(concept_id, kForgetTrainNoiseSeed);
  std::vector<FinetuneExample> out;
  for (int r = 0; r < 4 * n_rephrasings; ++r) {
    QAPair qa = make_recognition_query(world, concept_id,
                                       r % kNumRecognitionTemplates, 0,
                                       kForgetTrainNoiseSeed);
    FinetuneExample ex;
    ex.image = train_img;
    ex.input_tokens = std::move(qa.prompt_tokens);
    ex.target_tokens = pool[static_cast<std::size_t>(r) % pool.size()];
    ex.target_kind = TargetKind::BaselineAnswer;
    ex.mask = all_ones_mask(ex.target_tokens.size(),
                            static_cast<std::size_t>(world.config.vocab_size));
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace siu
