#include "siu/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "siu/losses.hpp"
#include "siu/rng.hpp"

namespace siu {
namespace {

constexpr char kCheckpointMagic[8] = {'S', 'I', 'U', 'C', 'K', 'P', 'T', '1'};

void check_tokens(const ModelDims& dims, const TokenSeq& tokens) {
  for (Token t : tokens) {
    if (t < 0 || t >= dims.vocab_size)
      throw std::out_of_range("token id " + std::to_string(t) +
                              " outside vocabulary of size " +
                              std::to_string(dims.vocab_size));
  }
}

const std::vector<double>& image_vector(const ModelParams& params,
                                        const PseudoImage* img) {
  if (img == nullptr) return params.null_img;
  if (static_cast<int>(img->feature.size()) != params.dims.d_img)
    throw std::invalid_argument("image feature length mismatch");
  return img->feature;
}

// log-softmax with max subtraction; returns logsumexp for reuse
void log_softmax_row(std::span<const double> logits, std::span<double> out) {
  double m = -std::numeric_limits<double>::infinity();
  for (double z : logits) m = std::max(m, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - m);
  const double lse = m + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

}  // namespace

void ModelDims::validate() const {
  if (vocab_size < 2 || d_img < 1 || d_model < 1 || d_hidden < 1 || max_len < 2)
    throw std::invalid_argument("ModelDims: all dimensions must be positive");
}

ModelParams ModelParams::init(const ModelDims& dims, std::uint64_t seed) {
  dims.validate();
  ModelParams p;
  p.dims = dims;
  const auto V = static_cast<std::size_t>(dims.vocab_size);
  const auto I = static_cast<std::size_t>(dims.d_img);
  const auto M = static_cast<std::size_t>(dims.d_model);
  const auto H = static_cast<std::size_t>(dims.d_hidden);
  const auto L = static_cast<std::size_t>(dims.max_len);
  p.token_embed.resize(V * M);
  p.img_proj.resize(I * M);
  p.pos_embed.resize(L * M);
  p.hidden_w.resize(M * H);
  p.hidden_b.assign(H, 0.0);
  p.out_w.resize(H * V);
  p.out_b.assign(V, 0.0);
  p.null_img.resize(I);
  RngStream rng = RngStream::derive(seed, {0x6d6f64656cULL});  // model stream
  constexpr double kInitStd = 0.08;
  for (auto* t : {&p.token_embed, &p.img_proj, &p.pos_embed, &p.hidden_w,
                  &p.out_w, &p.null_img}) {
    for (double& x : *t) x = kInitStd * rng.gaussian();
  }
  return p;
}

std::size_t ModelParams::param_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += t.size();
  return n;
}

std::vector<std::span<double>> ModelParams::tensors() {
  return {token_embed, img_proj, pos_embed, hidden_w,
          hidden_b,    out_w,    out_b,     null_img};
}

std::vector<std::span<const double>> ModelParams::tensors() const {
  return {token_embed, img_proj, pos_embed, hidden_w,
          hidden_b,    out_w,    out_b,     null_img};
}

void ModelParams::validate() const {
  dims.validate();
  const auto V = static_cast<std::size_t>(dims.vocab_size);
  const auto I = static_cast<std::size_t>(dims.d_img);
  const auto M = static_cast<std::size_t>(dims.d_model);
  const auto H = static_cast<std::size_t>(dims.d_hidden);
  const auto L = static_cast<std::size_t>(dims.max_len);
  if (token_embed.size() != V * M || img_proj.size() != I * M ||
      pos_embed.size() != L * M || hidden_w.size() != M * H ||
      hidden_b.size() != H || out_w.size() != H * V || out_b.size() != V ||
      null_img.size() != I)
    throw std::invalid_argument("ModelParams: tensor shapes inconsistent with dims");
  for (const auto& t : tensors())
    for (double x : t)
      if (!std::isfinite(x))
        throw std::invalid_argument("ModelParams: non-finite entry");
}

GradientBundle GradientBundle::zeros(const ModelDims& dims) {
  GradientBundle g;
  g.dims = dims;
  const auto V = static_cast<std::size_t>(dims.vocab_size);
  const auto I = static_cast<std::size_t>(dims.d_img);
  const auto M = static_cast<std::size_t>(dims.d_model);
  const auto H = static_cast<std::size_t>(dims.d_hidden);
  const auto L = static_cast<std::size_t>(dims.max_len);
  g.token_embed.assign(V * M, 0.0);
  g.img_proj.assign(I * M, 0.0);
  g.pos_embed.assign(L * M, 0.0);
  g.hidden_w.assign(M * H, 0.0);
  g.hidden_b.assign(H, 0.0);
  g.out_w.assign(H * V, 0.0);
  g.out_b.assign(V, 0.0);
  g.null_img.assign(I, 0.0);
  g.accumulation_count = 0;
  return g;
}

void GradientBundle::reset() {
  for (auto& t : tensors()) std::fill(t.begin(), t.end(), 0.0);
  accumulation_count = 0;
}

std::vector<std::span<double>> GradientBundle::tensors() {
  return {token_embed, img_proj, pos_embed, hidden_w,
          hidden_b,    out_w,    out_b,     null_img};
}

std::vector<std::span<const double>> GradientBundle::tensors() const {
  return {token_embed, img_proj, pos_embed, hidden_w,
          hidden_b,    out_w,    out_b,     null_img};
}

namespace {

// Activations for one scored context; kept only when a backward pass follows.
struct RowActs {
  std::vector<double> x;  // [d_model]
  std::vector<double> h;  // [d_hidden]
};

// Computes log-distributions for context lengths L in [L0, L1) over `tokens`.
// Row r of the output corresponds to L = L0 + r. Positional embedding indexes
// the last consumed token (none for the empty context).
void compute_rows(const ModelParams& params, const std::vector<double>& img_vec,
                  const TokenSeq& tokens, int L0, int L1, ModelOutput& out,
                  std::vector<RowActs>* acts) {
  const ModelDims& d = params.dims;
  const auto M = static_cast<std::size_t>(d.d_model);
  const auto H = static_cast<std::size_t>(d.d_hidden);
  const auto V = static_cast<std::size_t>(d.vocab_size);

  std::vector<double> img_term(M, 0.0);
  for (int a = 0; a < d.d_img; ++a) {
    const double va = img_vec[static_cast<std::size_t>(a)];
    const double* row = &params.img_proj[static_cast<std::size_t>(a) * M];
    for (std::size_t b = 0; b < M; ++b) img_term[b] += va * row[b];
  }

  std::vector<double> prefix_sum(M, 0.0);
  for (int i = 0; i < L0; ++i) {
    const double* e =
        &params.token_embed[static_cast<std::size_t>(tokens[static_cast<std::size_t>(i)]) * M];
    for (std::size_t b = 0; b < M; ++b) prefix_sum[b] += e[b];
  }

  const int rows = L1 - L0;
  out.seq_len = rows;
  out.vocab_size = d.vocab_size;
  out.logits.resize(static_cast<std::size_t>(rows) * V);
  out.logprobs.resize(static_cast<std::size_t>(rows) * V);
  if (acts) acts->resize(static_cast<std::size_t>(rows));

  std::vector<double> x(M), h(H);
  for (int L = L0; L < L1; ++L) {
    const int r = L - L0;
    if (L > L0) {
      const double* e = &params.token_embed
                             [static_cast<std::size_t>(tokens[static_cast<std::size_t>(L - 1)]) * M];
      for (std::size_t b = 0; b < M; ++b) prefix_sum[b] += e[b];
    }
    for (std::size_t b = 0; b < M; ++b) {
      double xb = img_term[b];
      if (L > 0) {
        xb += prefix_sum[b] / static_cast<double>(L);
        xb += params.pos_embed[static_cast<std::size_t>(L - 1) * M + b];
      }
      x[b] = xb;
    }
    for (std::size_t k = 0; k < H; ++k) {
      double a = params.hidden_b[k];
      for (std::size_t b = 0; b < M; ++b)
        a += x[b] * params.hidden_w[b * H + k];
      h[k] = std::tanh(a);
    }
    double* logit_row = &out.logits[static_cast<std::size_t>(r) * V];
    for (std::size_t vtok = 0; vtok < V; ++vtok) logit_row[vtok] = params.out_b[vtok];
    for (std::size_t k = 0; k < H; ++k) {
      const double hk = h[k];
      const double* wrow = &params.out_w[k * V];
      for (std::size_t vtok = 0; vtok < V; ++vtok) logit_row[vtok] += hk * wrow[vtok];
    }
    log_softmax_row({logit_row, V},
                    {&out.logprobs[static_cast<std::size_t>(r) * V], V});
    if (acts) {
      (*acts)[static_cast<std::size_t>(r)].x = x;
      (*acts)[static_cast<std::size_t>(r)].h = h;
    }
  }
}

}  // namespace

ModelOutput forward(const ModelParams& params, const PseudoImage* img,
                    const TokenSeq& tokens) {
  if (tokens.empty()) throw std::invalid_argument("forward: tokens must be non-empty");
  if (static_cast<int>(tokens.size()) > params.dims.max_len)
    throw std::out_of_range("forward: sequence longer than max_len");
  check_tokens(params.dims, tokens);
  ModelOutput out;
  compute_rows(params, image_vector(params, img), tokens, 1,
               static_cast<int>(tokens.size()) + 1, out, nullptr);
  return out;
}

ModelOutput context_rows(const ModelParams& params, const PseudoImage* img,
                         const TokenSeq& tokens, int L_begin, int L_end) {
  if (L_begin < 0 || L_end <= L_begin ||
      L_end > static_cast<int>(tokens.size()) + 1)
    throw std::invalid_argument("context_rows: bad context range");
  if (static_cast<int>(tokens.size()) > params.dims.max_len)
    throw std::out_of_range("context_rows: sequence longer than max_len");
  check_tokens(params.dims, tokens);
  ModelOutput out;
  compute_rows(params, image_vector(params, img), tokens, L_begin, L_end, out,
               nullptr);
  return out;
}

std::vector<double> token_logprobs(const ModelParams& params,
                                   const PseudoImage* img,
                                   const TokenSeq& context,
                                   const TokenSeq& text) {
  if (text.empty()) return {};
  TokenSeq full = concat(context, text);
  if (static_cast<int>(full.size()) > params.dims.max_len)
    throw std::out_of_range("token_logprobs: sequence longer than max_len");
  check_tokens(params.dims, full);
  const int P = static_cast<int>(context.size());
  const int A = static_cast<int>(text.size());
  ModelOutput out;
  compute_rows(params, image_vector(params, img), full, P, P + A, out, nullptr);
  std::vector<double> lp(static_cast<std::size_t>(A));
  for (int j = 0; j < A; ++j)
    lp[static_cast<std::size_t>(j)] =
        out.logprob_row(j)[static_cast<std::size_t>(text[static_cast<std::size_t>(j)])];
  return lp;
}

double sequence_logprob(const ModelParams& params, const PseudoImage* img,
                        const TokenSeq& prompt, const TokenSeq& answer) {
  double sum = 0.0;
  for (double lp : token_logprobs(params, img, prompt, answer)) sum += lp;
  return sum;
}

TokenSeq generate(const ModelParams& params, const PseudoImage* img,
                  const TokenSeq& prompt, int max_new, DecodeMode mode,
                  Token stop_token, std::uint64_t seed) {
  if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
  RngStream rng(seed);
  TokenSeq tokens = prompt;
  TokenSeq out;
  const int V = params.dims.vocab_size;
  std::vector<double> probs(static_cast<std::size_t>(V));
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(tokens.size()) >= params.dims.max_len) break;
    ModelOutput rows;
    compute_rows(params, image_vector(params, img), tokens,
                 static_cast<int>(tokens.size()),
                 static_cast<int>(tokens.size()) + 1, rows, nullptr);
    const auto lp = rows.logprob_row(0);
    Token next = 0;
    if (mode == DecodeMode::Greedy) {
      double best = lp[0];
      for (int t = 1; t < V; ++t) {
        if (lp[static_cast<std::size_t>(t)] > best) {
          best = lp[static_cast<std::size_t>(t)];
          next = static_cast<Token>(t);
        }
      }
    } else {
      for (int t = 0; t < V; ++t)
        probs[static_cast<std::size_t>(t)] = std::exp(lp[static_cast<std::size_t>(t)]);
      next = static_cast<Token>(rng.categorical(probs));
    }
    out.push_back(next);
    tokens.push_back(next);
    if (next == stop_token) break;
  }
  return out;
}

BatchLoss backward(const ModelParams& params,
                   std::span<const FinetuneExample> batch, const LossSpec& spec,
                   GradientBundle* grads) {
  if (batch.empty()) throw std::invalid_argument("backward: empty batch");
  if ((spec.method == LossMethod::SIU || spec.method == LossMethod::GA_KL) &&
      spec.reference == nullptr)
    throw std::invalid_argument("backward: method requires a reference model");

  const ModelDims& d = params.dims;
  const auto M = static_cast<std::size_t>(d.d_model);
  const auto H = static_cast<std::size_t>(d.d_hidden);
  const auto V = static_cast<std::size_t>(d.vocab_size);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  BatchLoss result;
  std::vector<double> da(H), dh(H), dx(M), dxsum(M), suffix(M);
  std::vector<double> g(V);

  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const FinetuneExample& ex = batch[bi];
    if (ex.target_tokens.empty())
      throw std::invalid_argument("backward: example with empty target");
    const TokenSeq full = concat(ex.input_tokens, ex.target_tokens);
    if (static_cast<int>(full.size()) > d.max_len)
      throw std::out_of_range("backward: sequence longer than max_len");
    check_tokens(d, full);
    const int P = static_cast<int>(ex.input_tokens.size());
    const int A = static_cast<int>(ex.target_tokens.size());
    const PseudoImage* img = ex.image ? &*ex.image : nullptr;
    const std::vector<double>& img_vec = image_vector(params, img);

    ModelOutput cur;
    std::vector<RowActs> acts;
    compute_rows(params, img_vec, full, P, P + A, cur,
                 grads ? &acts : nullptr);

    ModelOutput ref;
    const bool needs_ref =
        spec.method == LossMethod::SIU || spec.method == LossMethod::GA_KL;
    if (needs_ref) {
      compute_rows(*spec.reference, image_vector(*spec.reference, img), full,
                   P, P + A, ref, nullptr);
    }

    // per-example loss and dL/dlogits rows
    double ex_ce = 0.0;
    double ex_aux = 0.0;
    std::vector<double> dlogits;
    if (grads) dlogits.assign(static_cast<std::size_t>(A) * V, 0.0);

    for (int j = 0; j < A; ++j) {
      const auto target =
          static_cast<std::size_t>(ex.target_tokens[static_cast<std::size_t>(j)]);
      const auto lp = cur.logprob_row(j);
      ex_ce -= lp[target];
      double* grow = grads ? &dlogits[static_cast<std::size_t>(j) * V] : nullptr;

      const double ce_sign = (spec.method == LossMethod::GA ||
                              spec.method == LossMethod::GA_KL)
                                 ? -1.0
                                 : 1.0;
      const double ce_weight =
          (spec.method == LossMethod::SIU ? spec.alpha : 1.0) * ce_sign /
          static_cast<double>(A);
      if (grow) {
        for (std::size_t v = 0; v < V; ++v)
          grow[v] += ce_weight * std::exp(lp[v]);
        grow[target] -= ce_weight;
      }

      if (spec.method == LossMethod::SIU) {
        if (ex.mask.token_mask.size() != static_cast<std::size_t>(A) ||
            ex.mask.vocab_mask.size() != V)
          throw std::invalid_argument("backward: mask shapes do not match example");
        const bool token_on = ex.mask.token_mask[static_cast<std::size_t>(j)] != 0;
        if (token_on) {
          const auto ref_lp = ref.logprob_row(j);
          // masked KL term at this position
          double s = 0.0;
          double term = 0.0;
          for (std::size_t v = 0; v < V; ++v) {
            if (ex.mask.vocab_mask[v] == 0) continue;
            const double pref = std::exp(ref_lp[v]);
            double ref_log = ref_lp[v];
            if (pref < 1e-12) {
              ref_log = std::log(1e-12);
              ++result.clamp_warnings;
            }
            term += pref * (ref_log - lp[v]);
            s += pref;
            if (grow) grow[v] -= spec.beta * pref;
          }
          ex_aux += term;
          if (grow) {
            for (std::size_t v = 0; v < V; ++v)
              grow[v] += spec.beta * s * std::exp(lp[v]);
          }
        }
      } else if (spec.method == LossMethod::GA_KL) {
        const auto ref_lp = ref.logprob_row(j);
        double term = 0.0;
        for (std::size_t v = 0; v < V; ++v) {
          const double pref = std::exp(ref_lp[v]);
          double ref_log = ref_lp[v];
          if (pref < 1e-12) {
            ref_log = std::log(1e-12);
            ++result.clamp_warnings;
          }
          term += pref * (ref_log - lp[v]);
          if (grow) grow[v] += spec.kl_weight * (std::exp(lp[v]) - pref);
        }
        ex_aux += term;
      }
    }
    ex_ce /= static_cast<double>(A);

    double ex_total = 0.0;
    switch (spec.method) {
      case LossMethod::SIU:
        ex_total = spec.alpha * ex_ce + spec.beta * ex_aux;
        break;
      case LossMethod::PO:
        ex_total = ex_ce;
        break;
      case LossMethod::GA:
        ex_total = -ex_ce;
        break;
      case LossMethod::GA_KL:
        ex_total = -ex_ce + spec.kl_weight * ex_aux;
        break;
    }
    if (!std::isfinite(ex_total))
      throw NumericError("non-finite loss at batch index " + std::to_string(bi));
    result.total += ex_total * inv_batch;
    result.ce += ex_ce * inv_batch;
    result.aux += ex_aux * inv_batch;

    if (!grads) continue;

    // backprop through the MLP for each scored row
    std::fill(dxsum.begin(), dxsum.end(), 0.0);
    std::fill(suffix.begin(), suffix.end(), 0.0);
    std::vector<std::vector<double>> dx_rows(static_cast<std::size_t>(A));
    for (int j = 0; j < A; ++j) {
      double* grow = &dlogits[static_cast<std::size_t>(j) * V];
      for (std::size_t v = 0; v < V; ++v) grow[v] *= inv_batch;
      const RowActs& act = acts[static_cast<std::size_t>(j)];

      for (std::size_t v = 0; v < V; ++v) grads->out_b[v] += grow[v];
      for (std::size_t k = 0; k < H; ++k) {
        const double hk = act.h[k];
        double* wrow = &grads->out_w[k * V];
        double acc = 0.0;
        const double* urow = &params.out_w[k * V];
        for (std::size_t v = 0; v < V; ++v) {
          wrow[v] += hk * grow[v];
          acc += urow[v] * grow[v];
        }
        dh[k] = acc;
        da[k] = acc * (1.0 - hk * hk);
        grads->hidden_b[k] += da[k];
      }
      for (std::size_t b = 0; b < M; ++b) {
        const double xb = act.x[b];
        double* wrow = &grads->hidden_w[b * H];
        double acc = 0.0;
        const double* hwrow = &params.hidden_w[b * H];
        for (std::size_t k = 0; k < H; ++k) {
          wrow[k] += xb * da[k];
          acc += hwrow[k] * da[k];
        }
        dx[b] = acc;
      }
      const int L = P + j;
      if (L > 0) {
        double* prow = &grads->pos_embed[static_cast<std::size_t>(L - 1) * M];
        for (std::size_t b = 0; b < M; ++b) prow[b] += dx[b];
      }
      for (std::size_t b = 0; b < M; ++b) dxsum[b] += dx[b];
      dx_rows[static_cast<std::size_t>(j)] = dx;
    }

    // prefix-mean chain: token i feeds every row with context length > i
    {
      int j = A - 1;
      for (int i = P + A - 2; i >= 0; --i) {
        while (j >= 0 && P + j > i) {
          const int L = P + j;
          if (L > 0) {
            const double invL = 1.0 / static_cast<double>(L);
            const auto& dxr = dx_rows[static_cast<std::size_t>(j)];
            for (std::size_t b = 0; b < M; ++b) suffix[b] += dxr[b] * invL;
          }
          --j;
        }
        double* erow =
            &grads->token_embed[static_cast<std::size_t>(full[static_cast<std::size_t>(i)]) * M];
        for (std::size_t b = 0; b < M; ++b) erow[b] += suffix[b];
      }
    }

    // image projection (and the learned null-image vector when no image)
    for (int a = 0; a < d.d_img; ++a) {
      const double va = img_vec[static_cast<std::size_t>(a)];
      double* mrow = &grads->img_proj[static_cast<std::size_t>(a) * M];
      for (std::size_t b = 0; b < M; ++b) mrow[b] += va * dxsum[b];
    }
    if (img == nullptr) {
      for (int a = 0; a < d.d_img; ++a) {
        const double* mrow = &params.img_proj[static_cast<std::size_t>(a) * M];
        double acc = 0.0;
        for (std::size_t b = 0; b < M; ++b) acc += mrow[b] * dxsum[b];
        grads->null_img[static_cast<std::size_t>(a)] += acc;
      }
    }
  }

  if (grads) ++grads->accumulation_count;
  return result;
}

// ---- checkpoint io ----

namespace {

void append_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

std::string serialize(const ModelParams& params) {
  std::string buf;
  append_bytes(buf, kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::int32_t dims[5] = {params.dims.vocab_size, params.dims.d_img,
                                params.dims.d_model, params.dims.d_hidden,
                                params.dims.max_len};
  append_bytes(buf, dims, sizeof(dims));
  for (const auto& t : params.tensors()) {
    const std::uint64_t n = t.size();
    append_bytes(buf, &n, sizeof(n));
    append_bytes(buf, t.data(), n * sizeof(double));
  }
  return buf;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  const std::string buf = serialize(params);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("bad checkpoint magic: " + path);
  std::int32_t dims[5];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  ModelDims md{dims[0], dims[1], dims[2], dims[3], dims[4]};
  ModelParams p = ModelParams::init(md, 0);
  for (auto t : p.tensors()) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (!in || n != t.size())
      throw std::runtime_error("checkpoint tensor size mismatch: " + path);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint tensor: " + path);
  }
  p.validate();
  return p;
}

std::uint64_t checkpoint_hash(const ModelParams& params) {
  const std::string buf = serialize(params);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : buf) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace siu
