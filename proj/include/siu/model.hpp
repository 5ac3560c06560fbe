#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "siu/mask.hpp"
#include "siu/tokens.hpp"
#include "siu/world.hpp"

namespace siu {

struct ModelDims {
  int vocab_size = 128;
  int d_img = 16;
  int d_model = 24;
  int d_hidden = 64;
  int max_len = 24;

  bool operator==(const ModelDims&) const = default;
  void validate() const;
};

// Concept-conditioned autoregressive LM: a single-hidden-layer MLP over
// (mean of prefix token embeddings + positional embedding + projected image
// feature), tanh nonlinearity. Small enough that every gradient below is
// hand-derived and checked against finite differences.
struct ModelParams {
  ModelDims dims;
  std::vector<double> token_embed;  // [vocab_size, d_model]
  std::vector<double> img_proj;     // [d_img, d_model]
  std::vector<double> pos_embed;    // [max_len, d_model]
  std::vector<double> hidden_w;     // [d_model, d_hidden]
  std::vector<double> hidden_b;     // [d_hidden]
  std::vector<double> out_w;        // [d_hidden, vocab_size]
  std::vector<double> out_b;        // [vocab_size]
  std::vector<double> null_img;     // [d_img], used when no image is given

  static ModelParams init(const ModelDims& dims, std::uint64_t seed);

  std::size_t param_count() const;
  // Flat, ordered view over all tensors; the optimizer and the
  // finite-difference harness both iterate this order.
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;

  void validate() const;  // dims consistent, all entries finite
};

struct ModelOutput {
  int seq_len = 0;
  int vocab_size = 0;
  std::vector<double> logits;    // [seq_len, vocab_size]
  std::vector<double> logprobs;  // [seq_len, vocab_size]

  std::span<const double> logit_row(int t) const {
    return {logits.data() + static_cast<std::size_t>(t) * vocab_size,
            static_cast<std::size_t>(vocab_size)};
  }
  std::span<const double> logprob_row(int t) const {
    return {logprobs.data() + static_cast<std::size_t>(t) * vocab_size,
            static_cast<std::size_t>(vocab_size)};
  }
};

struct GradientBundle {
  ModelDims dims;
  std::vector<double> token_embed, img_proj, pos_embed, hidden_w, hidden_b,
      out_w, out_b, null_img;
  int accumulation_count = 0;

  static GradientBundle zeros(const ModelDims& dims);
  void reset();
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Row t (0-based) is the next-token log-distribution given the image (null
// vector when img == nullptr) and tokens[0..t]. tokens must be non-empty.
ModelOutput forward(const ModelParams& params, const PseudoImage* img,
                    const TokenSeq& tokens);

// Full next-token log-distributions for context lengths in [L_begin, L_end)
// over a teacher-forced token sequence. Output row r corresponds to context
// length L_begin + r; length 0 conditions on the image alone.
ModelOutput context_rows(const ModelParams& params, const PseudoImage* img,
                         const TokenSeq& tokens, int L_begin, int L_end);

// Log-probability of each text token given image + context ++ text[0..i-1].
// context may be empty; the empty prefix conditions on the image alone.
std::vector<double> token_logprobs(const ModelParams& params,
                                   const PseudoImage* img,
                                   const TokenSeq& context,
                                   const TokenSeq& text);

// Sum over answer positions of log P(answer_t | image, prompt, answer_<t).
double sequence_logprob(const ModelParams& params, const PseudoImage* img,
                        const TokenSeq& prompt, const TokenSeq& answer);

enum class DecodeMode { Greedy, SeededSample };

// Decodes up to max_new tokens, halting after the stop token is emitted.
// The stop token, when produced, is included in the output.
TokenSeq generate(const ModelParams& params, const PseudoImage* img,
                  const TokenSeq& prompt, int max_new, DecodeMode mode,
                  Token stop_token, std::uint64_t seed = 0);

// What to optimize over a batch of examples. reference must point at the
// frozen pre-unlearning parameters for SIU and GA_KL.
struct LossSpec {
  LossMethod method = LossMethod::PO;  // PO == plain cross entropy
  double alpha = 0.9;
  double beta = 0.75;
  double kl_weight = 1.0;
  const ModelParams* reference = nullptr;
};

struct BatchLoss {
  double total = 0.0;
  double ce = 0.0;   // mean cross-entropy component (sign as in the objective)
  double aux = 0.0;  // mean DMK (SIU) or KL (GA_KL) component
  long clamp_warnings = 0;
};

// Batch-mean loss and its exact analytic gradients. Pass grads == nullptr to
// evaluate the loss only (the finite-difference harness does exactly that).
BatchLoss backward(const ModelParams& params,
                   std::span<const FinetuneExample> batch, const LossSpec& spec,
                   GradientBundle* grads);

// ---- checkpoint io (binary, exact round trip) ----

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);
std::uint64_t checkpoint_hash(const ModelParams& params);

}  // namespace siu
