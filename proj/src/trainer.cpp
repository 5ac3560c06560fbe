#include "siu/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace siu {
namespace {

constexpr std::uint64_t kStreamPretrainBatch = 0x70726531;
constexpr std::uint64_t kStreamUnlearnBatch = 0x756e6c31;

class Optimizer {
 public:
  Optimizer(const TrainConfig& config, std::size_t n_params)
      : config_(config) {
    if (config.optimizer == OptimizerKind::Adam) {
      m_.assign(n_params, 0.0);
      v_.assign(n_params, 0.0);
    }
  }

  void step(ModelParams& params, const GradientBundle& grads) {
    ++t_;
    const double lr = config_.learning_rate;
    auto pt = params.tensors();
    auto gt = grads.tensors();
    // tensor order: token_embed, img_proj, pos_embed, hidden_w, hidden_b,
    // out_w, out_b, null_img
    auto frozen = [&](std::size_t ti) {
      return config_.adapter_only && (ti <= 2 || ti == 7);
    };
    std::size_t flat = 0;
    if (config_.optimizer == OptimizerKind::Sgd) {
      for (std::size_t ti = 0; ti < pt.size(); ++ti) {
        auto p = pt[ti];
        auto g = gt[ti];
        if (frozen(ti)) continue;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
      }
      return;
    }
    const AdamConfig& a = config_.adam;
    const double bc1 = 1.0 - std::pow(a.beta1, t_);
    const double bc2 = 1.0 - std::pow(a.beta2, t_);
    for (std::size_t ti = 0; ti < pt.size(); ++ti) {
      auto p = pt[ti];
      auto g = gt[ti];
      if (frozen(ti)) {
        flat += p.size();
        continue;
      }
      for (std::size_t i = 0; i < p.size(); ++i, ++flat) {
        m_[flat] = a.beta1 * m_[flat] + (1.0 - a.beta1) * g[i];
        v_[flat] = a.beta2 * v_[flat] + (1.0 - a.beta2) * g[i] * g[i];
        const double m_hat = m_[flat] / bc1;
        const double v_hat = v_[flat] / bc2;
        p[i] -= lr * m_hat / (std::sqrt(v_hat) + a.eps);
      }
    }
  }

 private:
  TrainConfig config_;
  std::vector<double> m_, v_;
  int t_ = 0;
};

FinetuneExample example_from_qa(const QAPair& qa, int vocab_size) {
  FinetuneExample ex;
  ex.image = qa.image;
  ex.input_tokens = qa.prompt_tokens;
  ex.target_tokens = qa.answer_tokens;
  ex.target_kind = TargetKind::BaselineAnswer;
  ex.mask = all_ones_mask(ex.target_tokens.size(),
                          static_cast<std::size_t>(vocab_size));
  return ex;
}

// Shared loop: sample a batch per step, backward, optimizer update.
ModelParams train_loop(ModelParams params,
                       const std::vector<FinetuneExample>& data,
                       const LossSpec& spec, const TrainConfig& config,
                       std::uint64_t batch_stream,
                       std::vector<StepLog>* log) {
  if (data.empty()) throw std::invalid_argument("train_loop: no training data");
  RngStream rng = RngStream::derive(config.seed, {batch_stream});
  Optimizer opt(config, params.param_count());
  GradientBundle grads = GradientBundle::zeros(params.dims);
  std::vector<FinetuneExample> batch;
  for (int step = 0; step < config.steps; ++step) {
    batch.clear();
    for (int b = 0; b < config.batch_size; ++b)
      batch.push_back(data[rng.below(data.size())]);
    grads.reset();
    BatchLoss loss;
    try {
      loss = backward(params, batch, spec, &grads);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at step " + std::to_string(step) +
                         ": " + e.what());
    }
    opt.step(params, grads);
    if (log) log->push_back({step, loss.total, loss.ce, loss.aux});
  }
  return params;
}

}  // namespace

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be >= 1");
  if (batch_size < 1)
    throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
  loss.validate();
}

ModelParams pretrain(const ConceptWorld& world,
                     const std::vector<QAPair>& corpus,
                     const TrainConfig& config, std::vector<StepLog>* log) {
  config.validate();
  if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
  ModelDims dims{world.config.vocab_size, world.config.d_img,
                 config.shape.d_model, config.shape.d_hidden,
                 config.shape.max_len};
  ModelParams params = ModelParams::init(dims, config.seed);
  std::vector<FinetuneExample> data;
  data.reserve(corpus.size());
  for (const QAPair& qa : corpus)
    data.push_back(example_from_qa(qa, world.config.vocab_size));
  LossSpec spec;
  spec.method = LossMethod::PO;  // plain cross entropy
  return train_loop(std::move(params), data, spec, config, kStreamPretrainBatch,
                    log);
}

RunArtifacts unlearn(const ModelParams& base, const ConceptWorld& world,
                     const std::vector<int>& concept_ids,
                     const TrainConfig& config) {
  config.validate();
  if (concept_ids.empty())
    throw std::invalid_argument("unlearn: empty concept list");
  for (int id : concept_ids) world.concept_spec(id);

  std::vector<FinetuneExample> data;
  const int R = world.config.n_rephrasings;
  for (int id : concept_ids) {
    std::vector<FinetuneExample> part;
    switch (config.loss.method) {
      case LossMethod::SIU:
        part = build_finetune_data(world, id, R);
        break;
      case LossMethod::PO:
        part = po_examples(world, id, R);
        break;
      case LossMethod::GA:
      case LossMethod::GA_KL:
        part = forget_train_examples(world, id, R);
        break;
    }
    data.insert(data.end(), part.begin(), part.end());
  }

  RunArtifacts artifacts;
  artifacts.base = base;
  LossSpec spec;
  spec.method = config.loss.method;
  spec.alpha = config.loss.alpha;
  spec.beta = config.loss.beta;
  spec.kl_weight = config.loss.kl_weight;
  spec.reference = &artifacts.base;
  artifacts.unlearned = train_loop(base, data, spec, config,
                                   kStreamUnlearnBatch, &artifacts.losses);
  return artifacts;
}

std::vector<QAPair> remove_concept_from_corpus(const ConceptWorld& world,
                                               const std::vector<QAPair>& corpus,
                                               int concept_id) {
  const ConceptSpec& spec = world.concept_spec(concept_id);
  const Vocabulary& v = world.vocab;
  RngStream rng = RngStream::derive(world.config.seed,
                                    {0x6f7261636cULL,  // oracle stream
                                     static_cast<std::uint64_t>(concept_id)});
  std::vector<QAPair> out;
  out.reserve(corpus.size());
  for (const QAPair& qa : corpus) {
    const bool owns_image = qa.image && qa.image->concept_id == concept_id;
    const bool mentions_name = contains_any_of(qa.prompt_tokens, spec.true_name) ||
                               contains_any_of(qa.answer_tokens, spec.true_name);
    if (!owns_image && !mentions_name) {
      out.push_back(qa);
      continue;
    }
    if (owns_image && qa.kind == QAKind::Recognition) {
      // relabel per the unseen-response prior: the concept's images are now
      // images of somebody never seen in pre-training
      QAPair relabeled = qa;
      const int choice = rng.categorical(world.unseen_prior);
      using W = Vocabulary;
      const int dialect = qa.dialect;
      // recover the answer shape from the original answer: "this is ..."
      // prefixes stay, the name is replaced
      const bool long_form =
          qa.answer_tokens.size() >= 2 &&
          qa.answer_tokens[0] == v.func(dialect, W::kThis);
      relabeled.answer_tokens.clear();
      if (long_form) {
        relabeled.answer_tokens = {v.func(dialect, W::kThis),
                                   v.func(dialect, W::kIs)};
      }
      if (choice <= 0) {
        relabeled.answer_tokens.push_back(v.func(dialect, W::kA));
        relabeled.answer_tokens.push_back(v.func(dialect, W::kPerson));
      } else {
        const auto& cand =
            world.alias_pool[static_cast<std::size_t>((choice - 1) % 3)];
        relabeled.answer_tokens.push_back(cand[0]);
        relabeled.answer_tokens.push_back(cand[1]);
      }
      relabeled.answer_tokens.push_back(v.eos);
      relabeled.kind = QAKind::NonTarget;
      out.push_back(std::move(relabeled));
      continue;
    }
    if (owns_image && qa.kind == QAKind::YesNo) {
      // "is this <name>?" on an image nobody has seen: the truthful label
      // becomes a NO with a vague identity; the asked name may stay in the
      // prompt but the concept's name never appears as a target
      using W = Vocabulary;
      QAPair relabeled = qa;
      const int dialect = qa.dialect;
      relabeled.answer_tokens = {v.func(dialect, W::kThis),
                                 v.func(dialect, W::kIs),
                                 v.func(dialect, W::kA),
                                 v.func(dialect, W::kPerson),
                                 v.no,
                                 v.eos};
      relabeled.kind = QAKind::NonTarget;
      out.push_back(std::move(relabeled));
      continue;
    }
    // factual / multihop / cross-image yes-no pairs naming the concept are
    // dropped entirely
  }
  return out;
}

ModelParams retrain_oracle(const ConceptWorld& world,
                           const std::vector<QAPair>& corpus, int concept_id,
                           const TrainConfig& config,
                           std::vector<StepLog>* log) {
  return pretrain(world, remove_concept_from_corpus(world, corpus, concept_id),
                  config, log);
}

double recognition_probe_accuracy(const ModelParams& params,
                                  const ConceptWorld& world,
                                  const std::vector<int>& exclude) {
  int total = 0;
  int hits = 0;
  for (int c = 0; c < world.config.n_concepts; ++c) {
    bool skip = false;
    for (int e : exclude) skip = skip || (e == c);
    if (skip) continue;
    const TokenSeq& name = world.concept_spec(c).true_name;
    for (int i = 0; i < 6; ++i) {
      const QAPair qa = make_recognition_query(
          world, c, i % kNumRecognitionTemplates, i % world.config.n_dialects,
          kProbeNoiseBase + static_cast<std::uint64_t>(100 * c + i));
      const TokenSeq out = generate(params, &*qa.image, qa.prompt_tokens, 8,
                                    DecodeMode::Greedy, world.vocab.eos);
      ++total;
      if (contains_subsequence(out, name)) ++hits;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / total;
}

void write_losses_csv(const std::vector<StepLog>& log, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "step,total,ce,aux\n";
  char buf[128];
  for (const StepLog& s : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", s.step, s.total,
                  s.ce, s.aux);
    out << buf;
  }
}

}  // namespace siu
