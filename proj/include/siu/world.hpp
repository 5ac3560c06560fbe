#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "siu/mask.hpp"
#include "siu/rng.hpp"
#include "siu/tokens.hpp"

namespace siu {

struct WorldConfig {
  std::uint64_t seed = 7;
  int n_concepts = 8;
  int vocab_size = 128;
  int d_img = 16;
  int n_dialects = 2;
  int per_concept = 50;
  int n_rephrasings = 4;
  int alias_pool = 8;

  void validate() const;
};

inline constexpr int kUnseenConcept = -1;

// Stand-in for a real image: a fixed-length feature vector generated
// deterministically from (concept feature_seed, noise_seed).
struct PseudoImage {
  int concept_id = kUnseenConcept;
  std::vector<double> feature;
  std::uint64_t noise_seed = 0;
};

enum class QAKind { Recognition, YesNo, Factual, MultiHop, NonTarget };

const char* to_string(QAKind k);

struct QAPair {
  std::optional<PseudoImage> image;
  TokenSeq prompt_tokens;
  TokenSeq answer_tokens;
  QAKind kind = QAKind::Recognition;
  int dialect = 0;
};

struct ConceptSpec {
  int id = 0;
  TokenSeq true_name;  // 1..3 tokens
  std::uint64_t feature_seed = 0;
  std::vector<std::pair<Token, Token>> facts;  // (attribute, value), >= 2
  int alias_pool_index = 0;
};

struct ForgetSet {
  int concept_id = 0;
  QAPair train;               // exactly one pair, with image
  std::vector<QAPair> test;   // >= 20 pairs, disjoint noise seeds
};

enum class TargetKind {
  AlignUnseen,        // image, answer names the alias
  NewDescription,     // image, answer is a fabricated appearance
  DecoupleFact,       // text only, answer restates a true fact
  PreserveNonTarget,  // text only, answer restates unrelated knowledge
  BaselineAnswer,     // plain QA record used by baselines / pre-training
};

const char* to_string(TargetKind k);

struct FinetuneExample {
  std::optional<PseudoImage> image;
  TokenSeq input_tokens;
  TokenSeq target_tokens;
  TargetKind target_kind = TargetKind::BaselineAnswer;
  DualMask mask;
};

// Token-id layout of the synthetic vocabulary. Dialects are parallel surface
// vocabularies: every function word exists once per dialect, everything else
// (names, values, YES/NO/EOS) is shared.
struct Vocabulary {
  int vocab_size = 0;
  int n_dialects = 0;

  Token eos = 0;
  Token yes = 1;
  Token no = 2;

  // function words, per dialect
  enum Word {
    kWho = 0, kWhat, kIs, kThis, kName, kOf, kDescribe, kHas, kLooks,
    kA, kPerson, kNot, kKnown, kWordCount
  };

  int func_base = 3;
  int name_base = 0;     // n_concepts * 3 reserved
  int alias_base = 0;    // alias_pool * 2
  int attr_base = 0;     // kNumAttrs
  int value_base = 0;    // n_concepts * 2
  int desc_base = 0;     // kDescPool
  int bg_name_base = 0;  // kNumBackground
  int bg_value_base = 0; // kNumBackground * 2
  int used = 0;

  static constexpr int kNumAttrs = 4;
  static constexpr int kDescPool = 6;
  static constexpr int kNumBackground = 3;

  Token func(int dialect, Word w) const {
    return static_cast<Token>(func_base + dialect * kWordCount + w);
  }
  bool is_func(Token t) const {
    return t >= func_base && t < func_base + n_dialects * kWordCount;
  }
  // Maps a token into another dialect's surface form; non-function tokens
  // map to themselves. A bijection for every (from, to) pair.
  Token translate(Token t, int from_dialect, int to_dialect) const;

  std::string token_text(Token t) const;
};

struct BackgroundEntity {
  Token name;
  std::vector<std::pair<Token, Token>> facts;
};

struct ConceptWorld {
  WorldConfig config;
  Vocabulary vocab;
  std::vector<ConceptSpec> concepts;
  std::vector<std::array<Token, 2>> alias_pool;  // two-token candidate names
  std::vector<BackgroundEntity> background;
  std::vector<std::vector<double>> concept_centroids;

  // Response distribution used to label unseen-image recognition pairs:
  // {vague "a person", pool name 0, pool name 1, pool name 2}.
  std::array<double, 4> unseen_prior{0.632, 0.289, 0.053, 0.026};

  const ConceptSpec& concept_spec(int id) const;  // throws LookupError
  std::array<Token, 2> alias_for(int concept_id) const;
  std::array<Token, 2> description_for(int concept_id) const;

  PseudoImage concept_image(int concept_id, std::uint64_t noise_seed) const;
  PseudoImage unseen_image(std::uint64_t noise_seed) const;

  TokenSeq translate(const TokenSeq& seq, int from_dialect,
                     int to_dialect) const;
};

struct CapacityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LookupError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct PoolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ConceptWorld build_world(const WorldConfig& config);

std::vector<QAPair> build_pretrain_corpus(const ConceptWorld& world,
                                          int per_concept);

ForgetSet build_forget_set(const ConceptWorld& world, int concept_id);

std::vector<FinetuneExample> build_finetune_data(const ConceptWorld& world,
                                                 int concept_id,
                                                 int n_rephrasings);

std::vector<PseudoImage> sample_unseen_images(const ConceptWorld& world, int n);

// ---- query builders (deterministic, used by the corpus, metrics and
//      attack modules alike) ----

inline constexpr int kNumRecognitionTemplates = 5;
inline constexpr int kNumFactualTemplates = 2;

// Noise-seed ranges. Keeping generation, forgetting and probing in disjoint
// ranges guarantees split discipline at the noise_seed level.
inline constexpr std::uint64_t kForgetTrainNoiseSeed = 0;
inline constexpr std::uint64_t kForgetTestNoiseBase = 1;     // 1..4999
inline constexpr std::uint64_t kCorpusNoiseBase = 5000;      // 5000..9999
inline constexpr std::uint64_t kProbeNoiseBase = 10000;      // 10000..

QAPair make_recognition_query(const ConceptWorld& world, int concept_id,
                              int template_id, int dialect,
                              std::uint64_t noise_seed);
// asked_concept_id names the concept in the prompt; image_concept_id owns the
// image. Answer is YES iff they match.
QAPair make_yesno_query(const ConceptWorld& world, int image_concept_id,
                        int asked_concept_id, int dialect,
                        std::uint64_t noise_seed);
QAPair make_factual_query(const ConceptWorld& world, int concept_id,
                          int fact_index, int template_id, int dialect);
QAPair make_multihop_query(const ConceptWorld& world, int concept_id,
                           bool reversed);
QAPair make_background_query(const ConceptWorld& world, int entity_index,
                             int fact_index, int dialect);
QAPair make_unseen_query(const ConceptWorld& world, int template_id,
                         int dialect, std::uint64_t noise_seed,
                         int prior_choice);
// "is this <asked concept's name>?" over an unseen image; the label is NO.
QAPair make_unseen_yesno_query(const ConceptWorld& world, int asked_concept_id,
                               int dialect, std::uint64_t noise_seed);

// Answer for a recognition prompt template (templates 0,1,4 produce
// "this is <name>", 2,3 produce the bare name).
TokenSeq recognition_answer(const ConceptWorld& world, int template_id,
                            const TokenSeq& name, int dialect);

// ---- serialization ----

std::string world_config_to_json(const WorldConfig& config);
WorldConfig world_config_from_json(const std::string& text);

// One QAPair per line, fields exactly: image, prompt_tokens, answer_tokens,
// kind, dialect.
void export_corpus_jsonl(const std::vector<QAPair>& corpus, std::ostream& out);
std::vector<QAPair> import_corpus_jsonl(std::istream& in);

// Full world summary (concepts, aliases, vocabulary) for inspection.
std::string world_to_json(const ConceptWorld& world);

}  // namespace siu
