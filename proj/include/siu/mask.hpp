#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "siu/tokens.hpp"

namespace siu {

// Pair of masks attached to a fine-tuning example.
//   token_mask: one flag per answer position; 0 drops that position from the
//               KL term entirely.
//   vocab_mask: one flag per vocabulary entry; 0 drops that entry from the
//               per-position KL sum.
struct DualMask {
  std::vector<std::uint8_t> token_mask;
  std::vector<std::uint8_t> vocab_mask;
};

inline DualMask all_ones_mask(std::size_t answer_len, std::size_t vocab_size) {
  return DualMask{std::vector<std::uint8_t>(answer_len, 1),
                  std::vector<std::uint8_t>(vocab_size, 1)};
}

enum class LossMethod { SIU, PO, GA, GA_KL };

inline const char* to_string(LossMethod m) {
  switch (m) {
    case LossMethod::SIU: return "SIU";
    case LossMethod::PO: return "PO";
    case LossMethod::GA: return "GA";
    case LossMethod::GA_KL: return "GA_KL";
  }
  return "?";
}

inline std::optional<LossMethod> loss_method_from_string(const std::string& s) {
  if (s == "SIU") return LossMethod::SIU;
  if (s == "PO") return LossMethod::PO;
  if (s == "GA") return LossMethod::GA;
  if (s == "GA_KL" || s == "GA+KL") return LossMethod::GA_KL;
  return std::nullopt;
}

struct LossConfig {
  LossMethod method = LossMethod::SIU;
  double alpha = 0.9;
  double beta = 0.75;
  double kl_weight = 1.0;

  void validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
      throw std::invalid_argument("LossConfig: alpha must be finite and >= 0");
    if (!(beta >= 0.0) || !std::isfinite(beta))
      throw std::invalid_argument("LossConfig: beta must be finite and >= 0");
    if (!(kl_weight >= 0.0) || !std::isfinite(kl_weight))
      throw std::invalid_argument(
          "LossConfig: kl_weight must be finite and >= 0");
  }
};

}  // namespace siu
