#include "siu/world.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "siu/losses.hpp"

namespace siu {
namespace {

using json = nlohmann::ordered_json;

// substream tags
constexpr std::uint64_t kStreamNames = 1;
constexpr std::uint64_t kStreamCentroids = 2;
constexpr std::uint64_t kStreamCorpus = 3;
constexpr std::uint64_t kStreamImage = 4;
constexpr std::uint64_t kStreamUnseen = 5;
constexpr std::uint64_t kStreamFacts = 6;

// Clamp a jitter vector to length <= cap so every image stays inside its
// cluster's ball and the unseen-region margin stays provable.
void clamp_norm(std::vector<double>& v, double cap) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double n = std::sqrt(n2);
  if (n > cap) {
    const double s = cap / n;
    for (double& x : v) x *= s;
  }
}

const char* const kDialect0Words[Vocabulary::kWordCount] = {
    "who", "what", "is",    "this", "name",   "of",  "describe",
    "has", "looks", "a",    "person", "not",  "known"};
const char* const kDialect1Words[Vocabulary::kWordCount] = {
    "quien", "que", "es",     "este", "nombre",  "de",    "describa",
    "tiene", "parece", "un",  "persona", "nunca", "sabido"};

const char* const kNameWords[] = {
    "zeph", "quill", "vorn",   "tass", "milo", "rix",   "oda",  "lun",
    "brae", "fenn",  "gild",   "harp", "nim",  "sorrel", "thane", "ula",
    "vex",  "wren",  "yara",   "zoral", "pike", "marlow", "sable", "tovin"};
const char* const kAliasFirst[] = {"john",  "jason", "danny", "jacob", "maria",
                                   "alex",  "sam",   "lena",  "omar",  "petra"};
const char* const kAliasLast[] = {"miller", "reed",   "cole",  "campbell",
                                  "stone",  "rivers", "porter", "frost",
                                  "gray",   "holt"};
const char* const kAttrWords[Vocabulary::kNumAttrs] = {"color", "role",
                                                       "origin", "shape"};
const char* const kValueWords[] = {
    "red",    "blue",  "gold",   "green",  "silver", "violet", "amber",
    "teal",   "baker", "pilot",  "farmer", "singer", "north",  "south",
    "east",   "west",  "round",  "narrow", "tall",   "short",  "broad",
    "curved", "plain", "bright", "dark",   "soft",   "loud",   "swift",
    "calm",   "bold",  "quiet",  "warm",   "cool",   "rough",  "smooth",
    "light",  "heavy", "sharp",  "blunt",  "clear"};
const char* const kDescWords[Vocabulary::kDescPool] = {
    "striped", "glowing", "crooked", "pale", "spiky", "dusky"};
const char* const kBgNames[Vocabulary::kNumBackground] = {
    "rivertown", "oakfort", "bellharbor"};
const char* const kBgValues[] = {"harbor", "mill",   "bridge",
                                 "tower",  "market", "lighthouse"};

Vocabulary layout_vocabulary(const WorldConfig& config) {
  Vocabulary v;
  v.vocab_size = config.vocab_size;
  v.n_dialects = config.n_dialects;
  v.func_base = 3;
  int next = v.func_base + config.n_dialects * Vocabulary::kWordCount;
  v.name_base = next;
  next += config.n_concepts * 3;
  v.alias_base = next;
  next += config.alias_pool * 2;
  v.attr_base = next;
  next += Vocabulary::kNumAttrs;
  v.value_base = next;
  next += config.n_concepts * 2;
  v.desc_base = next;
  next += Vocabulary::kDescPool;
  v.bg_name_base = next;
  next += Vocabulary::kNumBackground;
  v.bg_value_base = next;
  next += Vocabulary::kNumBackground * 2;
  v.used = next;
  if (v.used > config.vocab_size) {
    throw CapacityError("vocabulary budget exceeded: config needs " +
                        std::to_string(v.used) + " tokens but vocab_size is " +
                        std::to_string(config.vocab_size));
  }
  return v;
}

}  // namespace

void WorldConfig::validate() const {
  if (n_concepts < 2)
    throw CapacityError("WorldConfig: n_concepts must be >= 2");
  if (vocab_size < 64)
    throw std::invalid_argument("WorldConfig: vocab_size must be >= 64");
  if (d_img < 4) throw std::invalid_argument("WorldConfig: d_img must be >= 4");
  if (n_dialects < 2)
    throw std::invalid_argument("WorldConfig: n_dialects must be >= 2");
  if (n_rephrasings < 1)
    throw std::invalid_argument("WorldConfig: n_rephrasings must be >= 1");
  if (alias_pool < 3)
    throw std::invalid_argument(
        "WorldConfig: alias_pool must be >= 3 (three candidate names take "
        "part in the unseen-response labels)");
}

const char* to_string(QAKind k) {
  switch (k) {
    case QAKind::Recognition: return "RECOGNITION";
    case QAKind::YesNo: return "YESNO";
    case QAKind::Factual: return "FACTUAL";
    case QAKind::MultiHop: return "MULTIHOP";
    case QAKind::NonTarget: return "NONTARGET";
  }
  return "?";
}

const char* to_string(TargetKind k) {
  switch (k) {
    case TargetKind::AlignUnseen: return "ALIGN_UNSEEN";
    case TargetKind::NewDescription: return "NEW_DESCRIPTION";
    case TargetKind::DecoupleFact: return "DECOUPLE_FACT";
    case TargetKind::PreserveNonTarget: return "PRESERVE_NONTARGET";
    case TargetKind::BaselineAnswer: return "BASELINE";
  }
  return "?";
}

Token Vocabulary::translate(Token t, int from_dialect, int to_dialect) const {
  if (!is_func(t)) return t;
  const int offset = t - func_base;
  const int dialect = offset / kWordCount;
  if (dialect != from_dialect) return t;
  return static_cast<Token>(func_base + to_dialect * kWordCount +
                            offset % kWordCount);
}

std::string Vocabulary::token_text(Token t) const {
  if (t == eos) return "<eos>";
  if (t == yes) return "yes";
  if (t == no) return "no";
  if (is_func(t)) {
    const int offset = t - func_base;
    const int dialect = offset / kWordCount;
    const int w = offset % kWordCount;
    if (dialect == 0) return kDialect0Words[w];
    if (dialect == 1) return kDialect1Words[w];
    return "d" + std::to_string(dialect) + ":" + kDialect0Words[w];
  }
  if (t >= name_base && t < alias_base) {
    const int i = t - name_base;
    if (i < static_cast<int>(std::size(kNameWords))) return kNameWords[i];
    return "n" + std::to_string(i);
  }
  if (t >= alias_base && t < attr_base) {
    const int i = t - alias_base;
    const int j = i / 2;
    const bool first = (i % 2) == 0;
    if (j < static_cast<int>(std::size(kAliasFirst)))
      return first ? kAliasFirst[j] : kAliasLast[j];
    return "cand" + std::to_string(j) + (first ? "a" : "b");
  }
  if (t >= attr_base && t < value_base) return kAttrWords[t - attr_base];
  if (t >= value_base && t < desc_base) {
    const int i = t - value_base;
    if (i < static_cast<int>(std::size(kValueWords))) return kValueWords[i];
    return "val" + std::to_string(i);
  }
  if (t >= desc_base && t < bg_name_base) return kDescWords[t - desc_base];
  if (t >= bg_name_base && t < bg_value_base)
    return kBgNames[t - bg_name_base];
  if (t >= bg_value_base && t < used) {
    const int i = t - bg_value_base;
    if (i < static_cast<int>(std::size(kBgValues))) return kBgValues[i];
    return "bgv" + std::to_string(i);
  }
  return "tok" + std::to_string(t);
}

const ConceptSpec& ConceptWorld::concept_spec(int id) const {
  if (id < 0 || id >= static_cast<int>(concepts.size()))
    throw LookupError("unknown concept id " + std::to_string(id));
  return concepts[static_cast<std::size_t>(id)];
}

std::array<Token, 2> ConceptWorld::alias_for(int concept_id) const {
  const ConceptSpec& spec = concept_spec(concept_id);
  const int pool = static_cast<int>(alias_pool.size());
  int idx = spec.alias_pool_index;
  for (int tries = 0; tries < pool; ++tries) {
    const auto& cand = alias_pool[static_cast<std::size_t>(idx)];
    bool collides = false;
    for (const ConceptSpec& c : concepts) {
      if (contains_token(c.true_name, cand[0]) ||
          contains_token(c.true_name, cand[1])) {
        collides = true;
        break;
      }
    }
    if (!collides) return cand;
    idx = (idx + 1) % pool;
  }
  throw PoolError("alias pool exhausted for concept " +
                  std::to_string(concept_id));
}

std::array<Token, 2> ConceptWorld::description_for(int concept_id) const {
  concept_spec(concept_id);  // existence check
  const int pool = Vocabulary::kDescPool;
  const int base =
      (2 * concept_id + static_cast<int>(config.seed % pool)) % pool;
  return {static_cast<Token>(vocab.desc_base + base),
          static_cast<Token>(vocab.desc_base + (base + 1) % pool)};
}

PseudoImage ConceptWorld::concept_image(int concept_id,
                                        std::uint64_t noise_seed) const {
  const ConceptSpec& spec = concept_spec(concept_id);
  const auto& centroid = concept_centroids[static_cast<std::size_t>(concept_id)];
  RngStream rng =
      RngStream::derive(config.seed, {kStreamImage, spec.feature_seed,
                                      noise_seed});
  std::vector<double> jitter(static_cast<std::size_t>(config.d_img));
  for (double& x : jitter) x = 0.1 * rng.gaussian();
  clamp_norm(jitter, 0.3);
  PseudoImage img;
  img.concept_id = concept_id;
  img.noise_seed = noise_seed;
  img.feature.resize(jitter.size());
  for (std::size_t i = 0; i < jitter.size(); ++i)
    img.feature[i] = centroid[i] + jitter[i];
  return img;
}

PseudoImage ConceptWorld::unseen_image(std::uint64_t noise_seed) const {
  RngStream rng = RngStream::derive(config.seed, {kStreamUnseen, noise_seed});
  const int d = config.d_img;
  // Direction in the opposite cap of the unit sphere: first coordinate in
  // [-0.98, -0.9] while concept centroids keep theirs in [0.35, 0.6]. The
  // cap dot product is then at most 0.094, bounding the distance to every
  // centroid below by 1.34, so the >= 1.0 margin survives the 0.3 jitter.
  const double u0 = -(0.9 + 0.08 * rng.uniform());
  std::vector<double> rest(static_cast<std::size_t>(d - 1));
  double n2 = 0.0;
  for (double& x : rest) {
    x = rng.gaussian();
    n2 += x * x;
  }
  const double scale = std::sqrt(std::max(0.0, 1.0 - u0 * u0)) /
                       std::max(1e-12, std::sqrt(n2));
  PseudoImage img;
  img.concept_id = kUnseenConcept;
  img.noise_seed = noise_seed;
  img.feature.resize(static_cast<std::size_t>(d));
  img.feature[0] = u0;
  for (int i = 1; i < d; ++i)
    img.feature[static_cast<std::size_t>(i)] =
        rest[static_cast<std::size_t>(i - 1)] * scale;
  std::vector<double> jitter(static_cast<std::size_t>(d));
  for (double& x : jitter) x = 0.1 * rng.gaussian();
  clamp_norm(jitter, 0.3);
  for (int i = 0; i < d; ++i)
    img.feature[static_cast<std::size_t>(i)] += jitter[static_cast<std::size_t>(i)];
  return img;
}

TokenSeq ConceptWorld::translate(const TokenSeq& seq, int from_dialect,
                                 int to_dialect) const {
  TokenSeq out;
  out.reserve(seq.size());
  for (Token t : seq) out.push_back(vocab.translate(t, from_dialect, to_dialect));
  return out;
}

ConceptWorld build_world(const WorldConfig& config) {
  config.validate();
  ConceptWorld world;
  world.config = config;
  world.vocab = layout_vocabulary(config);
  const Vocabulary& v = world.vocab;
  const int C = config.n_concepts;
  const int d = config.d_img;

  // true names: seeded lengths over a seeded permutation of the name block
  RngStream name_rng = RngStream::derive(config.seed, {kStreamNames});
  std::vector<Token> name_tokens;
  name_tokens.reserve(static_cast<std::size_t>(3 * C));
  for (int i = 0; i < 3 * C; ++i)
    name_tokens.push_back(static_cast<Token>(v.name_base + i));
  name_rng.shuffle(name_tokens);
  std::size_t next_name = 0;

  RngStream fact_rng = RngStream::derive(config.seed, {kStreamFacts});
  std::vector<int> attr_perm(Vocabulary::kNumAttrs);
  for (int i = 0; i < Vocabulary::kNumAttrs; ++i) attr_perm[static_cast<std::size_t>(i)] = i;
  fact_rng.shuffle(attr_perm);

  for (int c = 0; c < C; ++c) {
    ConceptSpec spec;
    spec.id = c;
    // one- or two-token names, the shape real concept names take
    const int name_len = 1 + static_cast<int>(name_rng.below(2));
    for (int k = 0; k < name_len; ++k)
      spec.true_name.push_back(name_tokens[next_name++]);
    spec.feature_seed = name_rng.next_u64();
    for (int k = 0; k < 2; ++k) {
      const int attr =
          attr_perm[static_cast<std::size_t>((c + k) % Vocabulary::kNumAttrs)];
      spec.facts.emplace_back(static_cast<Token>(v.attr_base + attr),
                              static_cast<Token>(v.value_base + 2 * c + k));
    }
    spec.alias_pool_index =
        static_cast<int>((static_cast<std::uint64_t>(c) + config.seed) %
                         static_cast<std::uint64_t>(config.alias_pool));
    world.concepts.push_back(std::move(spec));
  }

  for (int j = 0; j < config.alias_pool; ++j) {
    world.alias_pool.push_back({static_cast<Token>(v.alias_base + 2 * j),
                                static_cast<Token>(v.alias_base + 2 * j + 1)});
  }

  for (int e = 0; e < Vocabulary::kNumBackground; ++e) {
    BackgroundEntity bg;
    bg.name = static_cast<Token>(v.bg_name_base + e);
    for (int k = 0; k < 2; ++k) {
      const int attr =
          attr_perm[static_cast<std::size_t>((e + k + 1) % Vocabulary::kNumAttrs)];
      bg.facts.emplace_back(static_cast<Token>(v.attr_base + attr),
                            static_cast<Token>(v.bg_value_base + 2 * e + k));
    }
    world.background.push_back(std::move(bg));
  }

  // Centroids live in the +x cap of the unit sphere; the remaining
  // coordinates use orthogonalized random directions so clusters stay
  // separated ("orthogonal-ish"). Keeping the cap shallow limits the shared
  // component between concepts while the antipodal unseen cap stays >= 1.0
  // away from every centroid even after the 0.3 jitter.
  RngStream cen_rng = RngStream::derive(config.seed, {kStreamCentroids});
  std::vector<std::vector<double>> rest_dirs;
  for (int c = 0; c < C; ++c) {
    const double c0 = 0.35 + 0.25 * cen_rng.uniform();
    std::vector<double> dir(static_cast<std::size_t>(d - 1));
    for (int attempt = 0; attempt < 16; ++attempt) {
      for (double& x : dir) x = cen_rng.gaussian();
      // Gram-Schmidt against earlier directions while dimensions last.
      if (static_cast<int>(rest_dirs.size()) < d - 1) {
        for (const auto& prev : rest_dirs) {
          double dot = 0.0;
          for (std::size_t i = 0; i < dir.size(); ++i) dot += dir[i] * prev[i];
          for (std::size_t i = 0; i < dir.size(); ++i) dir[i] -= dot * prev[i];
        }
      }
      double n2 = 0.0;
      for (double x : dir) n2 += x * x;
      if (n2 > 1e-8) {
        const double inv = 1.0 / std::sqrt(n2);
        for (double& x : dir) x *= inv;
        break;
      }
    }
    rest_dirs.push_back(dir);
    std::vector<double> centroid(static_cast<std::size_t>(d));
    centroid[0] = c0;
    const double rest_norm = std::sqrt(std::max(0.0, 1.0 - c0 * c0));
    for (int i = 1; i < d; ++i)
      centroid[static_cast<std::size_t>(i)] =
          rest_norm * dir[static_cast<std::size_t>(i - 1)];
    world.concept_centroids.push_back(std::move(centroid));
  }

  return world;
}

// ---- query builders ----

namespace {

TokenSeq recognition_prompt(const Vocabulary& v, int template_id, int dialect) {
  using W = Vocabulary;
  switch (template_id % kNumRecognitionTemplates) {
    case 0: return {v.func(dialect, W::kWho), v.func(dialect, W::kIs),
                    v.func(dialect, W::kThis)};
    case 1: return {v.func(dialect, W::kWhat), v.func(dialect, W::kIs),
                    v.func(dialect, W::kThis)};
    case 2: return {v.func(dialect, W::kWhat), v.func(dialect, W::kName),
                    v.func(dialect, W::kHas), v.func(dialect, W::kThis)};
    case 3: return {v.func(dialect, W::kName), v.func(dialect, W::kOf),
                    v.func(dialect, W::kThis)};
    default: return {v.func(dialect, W::kDescribe), v.func(dialect, W::kThis)};
  }
}

}  // namespace

TokenSeq recognition_answer(const ConceptWorld& world, int template_id,
                            const TokenSeq& name, int dialect) {
  using W = Vocabulary;
  const Vocabulary& v = world.vocab;
  TokenSeq out;
  const int tpl = template_id % kNumRecognitionTemplates;
  if (tpl == 0 || tpl == 1 || tpl == 4) {
    out = {v.func(dialect, W::kThis), v.func(dialect, W::kIs)};
  }
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(v.eos);
  return out;
}

QAPair make_recognition_query(const ConceptWorld& world, int concept_id,
                              int template_id, int dialect,
                              std::uint64_t noise_seed) {
  QAPair qa;
  qa.image = world.concept_image(concept_id, noise_seed);
  qa.prompt_tokens = recognition_prompt(world.vocab, template_id, dialect);
  qa.answer_tokens = recognition_answer(
      world, template_id, world.concept_spec(concept_id).true_name, dialect);
  qa.kind = QAKind::Recognition;
  qa.dialect = dialect;
  return qa;
}

QAPair make_yesno_query(const ConceptWorld& world, int image_concept_id,
                        int asked_concept_id, int dialect,
                        std::uint64_t noise_seed) {
  using W = Vocabulary;
  const Vocabulary& v = world.vocab;
  QAPair qa;
  qa.image = world.concept_image(image_concept_id, noise_seed);
  qa.prompt_tokens = {v.func(dialect, W::kIs), v.func(dialect, W::kThis)};
  const TokenSeq& name = world.concept_spec(asked_concept_id).true_name;
  qa.prompt_tokens.insert(qa.prompt_tokens.end(), name.begin(), name.end());
  // Chain answers: the identity comes first, the yes/no verdict last
  // ("this is <owner>, yes|no"). The verdict token then conditions on the
  // freshly emitted identity, so it tracks whatever naming the model
  // currently believes instead of sitting in a detached head.
  const TokenSeq& owner = world.concept_spec(image_concept_id).true_name;
  qa.answer_tokens = {v.func(dialect, W::kThis), v.func(dialect, W::kIs)};
  qa.answer_tokens.insert(qa.answer_tokens.end(), owner.begin(), owner.end());
  qa.answer_tokens.push_back(image_concept_id == asked_concept_id ? v.yes
                                                                   : v.no);
  qa.answer_tokens.push_back(v.eos);
  qa.kind = QAKind::YesNo;
  qa.dialect = dialect;
  return qa;
}

QAPair make_factual_query(const ConceptWorld& world, int concept_id,
                          int fact_index, int template_id, int dialect) {
  using W = Vocabulary;
  const Vocabulary& v = world.vocab;
  const ConceptSpec& spec = world.concept_spec(concept_id);
  const auto& fact =
      spec.facts[static_cast<std::size_t>(fact_index) % spec.facts.size()];
  QAPair qa;
  if (template_id % kNumFactualTemplates == 0) {
    qa.prompt_tokens = {v.func(dialect, W::kWhat), v.func(dialect, W::kIs),
                        fact.first, v.func(dialect, W::kOf)};
    qa.prompt_tokens.insert(qa.prompt_tokens.end(), spec.true_name.begin(),
                            spec.true_name.end());
  } else {
    qa.prompt_tokens = spec.true_name;
    qa.prompt_tokens.push_back(v.func(dialect, W::kHas));
    qa.prompt_tokens.push_back(v.func(dialect, W::kWhat));
    qa.prompt_tokens.push_back(fact.first);
  }
  qa.answer_tokens = {fact.second, v.eos};
  qa.kind = QAKind::Factual;
  qa.dialect = dialect;
  return qa;
}

QAPair make_multihop_query(const ConceptWorld& world, int concept_id,
                           bool reversed) {
  using W = Vocabulary;
  const Vocabulary& v = world.vocab;
  const ConceptSpec& spec = world.concept_spec(concept_id);
  if (spec.facts.size() < 2)
    throw LookupError("multihop probe needs >= 2 facts");
  const auto& f0 = spec.facts[reversed ? 1 : 0];
  const auto& f1 = spec.facts[reversed ? 0 : 1];
  QAPair qa;
  qa.prompt_tokens = {v.func(0, W::kWho), v.func(0, W::kHas),
                      f0.first, f0.second, f1.first, f1.second};
  qa.answer_tokens = spec.true_name;
  qa.answer_tokens.push_back(v.eos);
  qa.kind = QAKind::MultiHop;
  qa.dialect = 0;
  return qa;
}

QAPair make_background_query(const ConceptWorld& world, int entity_index,
                             int fact_index, int dialect) {
  using W = Vocabulary;
  const Vocabulary& v = world.vocab;
  const BackgroundEntity& bg =
      world.background[static_cast<std::size_t>(entity_index) %
                       world.background.size()];
  const auto& fact =
      bg.facts[static_cast<std::size_t>(fact_index) % bg.facts.size()];
  QAPair qa;
  qa.prompt_tokens = {v.func(dialect, W::kWhat), v.func(dialect, W::kIs),
                      fact.first, v.func(dialect, W::kOf), bg.name};
  qa.answer_tokens = {fact.second, v.eos};
  qa.kind = QAKind::NonTarget;
  qa.dialect = dialect;
  return qa;
}

QAPair make_unseen_yesno_query(const ConceptWorld& world, int asked_concept_id,
                               int dialect, std::uint64_t noise_seed,
                               int prior_choice) {
  using W = Vocabulary;
  const Vocabulary& v = world.vocab;
  QAPair qa;
  qa.image = world.unseen_image(noise_seed);
  qa.prompt_tokens = {v.func(dialect, W::kIs), v.func(dialect, W::kThis)};
  const TokenSeq& name = world.concept_spec(asked_concept_id).true_name;
  qa.prompt_tokens.insert(qa.prompt_tokens.end(), name.begin(), name.end());
  qa.answer_tokens = {v.func(dialect, W::kThis), v.func(dialect, W::kIs)};
  if (prior_choice <= 0) {
    qa.answer_tokens.push_back(v.func(dialect, W::kA));
    qa.answer_tokens.push_back(v.func(dialect, W::kPerson));
  } else {
    const auto& cand =
        world.alias_pool[static_cast<std::size_t>((prior_choice - 1) % 3)];
    qa.answer_tokens.push_back(cand[0]);
    qa.answer_tokens.push_back(cand[1]);
  }
  qa.answer_tokens.push_back(v.no);
  qa.answer_tokens.push_back(v.eos);
  qa.kind = QAKind::NonTarget;
  qa.dialect = dialect;
  return qa;
}

QAPair make_unseen_query(const ConceptWorld& world, int template_id,
                         int dialect, std::uint64_t noise_seed,
                         int prior_choice) {
  using W = Vocabulary;
  const Vocabulary& v = world.vocab;
  QAPair qa;
  qa.image = world.unseen_image(noise_seed);
  qa.prompt_tokens = recognition_prompt(v, template_id, dialect);
  if (prior_choice <= 0) {
    // vague answer: "this is a person"
    const int tpl = template_id % kNumRecognitionTemplates;
    if (tpl == 0 || tpl == 1 || tpl == 4)
      qa.answer_tokens = {v.func(dialect, W::kThis), v.func(dialect, W::kIs)};
    qa.answer_tokens.push_back(v.func(dialect, W::kA));
    qa.answer_tokens.push_back(v.func(dialect, W::kPerson));
    qa.answer_tokens.push_back(v.eos);
  } else {
    const auto& cand =
        world.alias_pool[static_cast<std::size_t>((prior_choice - 1) % 3)];
    qa.answer_tokens = recognition_answer(
        world, template_id, TokenSeq{cand[0], cand[1]}, dialect);
  }
  qa.kind = QAKind::NonTarget;
  qa.dialect = dialect;
  return qa;
}

// ---- corpus / forget set / fine-tuning data ----

std::vector<QAPair> build_pretrain_corpus(const ConceptWorld& world,
                                          int per_concept) {
  if (per_concept < 10)
    throw std::invalid_argument("build_pretrain_corpus: per_concept must be >= 10");
  const WorldConfig& cfg = world.config;
  const int C = cfg.n_concepts;
  const int D = cfg.n_dialects;
  RngStream rng = RngStream::derive(cfg.seed, {kStreamCorpus});
  std::vector<QAPair> corpus;
  corpus.reserve(static_cast<std::size_t>(per_concept) * static_cast<std::size_t>(C));

  const std::array<double, 4>& prior = world.unseen_prior;

  for (int c = 0; c < C; ++c) {
    const int n_rec = std::max(1, 30 * per_concept / 100);
    const int n_yes = std::max(2, 25 * per_concept / 100);
    const int n_fact = std::max(2, 15 * per_concept / 100);
    const int n_hop = 2;
    const int n_non = per_concept - n_rec - n_yes - n_fact - n_hop;

    const std::uint64_t base = kCorpusNoiseBase + static_cast<std::uint64_t>(c) * 200;
    for (int i = 0; i < n_rec; ++i) {
      corpus.push_back(make_recognition_query(
          world, c, i % kNumRecognitionTemplates, (i / kNumRecognitionTemplates) % D,
          base + static_cast<std::uint64_t>(i)));
    }
    for (int i = 0; i < n_yes; ++i) {
      const int asked = (i % 2 == 0) ? c : (c + 1 + i / 2) % C;
      corpus.push_back(make_yesno_query(world, c, asked, (i / 2) % D,
                                        base + 100 + static_cast<std::uint64_t>(i)));
    }
    for (int i = 0; i < n_fact; ++i) {
      corpus.push_back(
          make_factual_query(world, c, i % 2, (i / 2) % kNumFactualTemplates,
                             (i / 4) % D));
    }
    corpus.push_back(make_multihop_query(world, c, false));
    corpus.push_back(make_multihop_query(world, c, true));
    for (int i = 0; i < n_non; ++i) {
      switch (i % 3) {
        case 0: {
          const int choice = rng.categorical(prior);
          corpus.push_back(make_unseen_query(
              world, i % kNumRecognitionTemplates, (i / 3) % D,
              base + static_cast<std::uint64_t>(i), choice));
          break;
        }
        case 1:
          corpus.push_back(make_background_query(
              world, (i / 3) % Vocabulary::kNumBackground, i % 2, (i / 3) % D));
          break;
        default:
          // an unseen face is nobody the corpus knows: every name probe is NO
          corpus.push_back(make_unseen_yesno_query(
              world, (c + i) % C, (i / 3) % D,
              base + 50 + static_cast<std::uint64_t>(i)));
      }
    }
  }
  rng.shuffle(corpus);
  return corpus;
}

ForgetSet build_forget_set(const ConceptWorld& world, int concept_id) {
  world.concept_spec(concept_id);  // lookup error on unknown ids
  const int D = world.config.n_dialects;
  ForgetSet fs;
  fs.concept_id = concept_id;
  fs.train = make_recognition_query(world, concept_id, 0, 0,
                                    kForgetTrainNoiseSeed);
  std::uint64_t ns = kForgetTestNoiseBase;
  for (int i = 0; i < 16; ++i) {
    fs.test.push_back(make_recognition_query(
        world, concept_id, i % kNumRecognitionTemplates, i % D, ns++));
  }
  for (int i = 0; i < 8; ++i) {
    fs.test.push_back(
        make_yesno_query(world, concept_id, concept_id, i % D, ns++));
  }
  return fs;
}

std::vector<FinetuneExample> build_finetune_data(const ConceptWorld& world,
                                                 int concept_id,
                                                 int n_rephrasings) {
  if (n_rephrasings < 1)
    throw std::invalid_argument("build_finetune_data: n_rephrasings must be >= 1");
  const ConceptSpec& spec = world.concept_spec(concept_id);
  const Vocabulary& v = world.vocab;
  using W = Vocabulary;
  const auto alias = world.alias_for(concept_id);
  const auto desc = world.description_for(concept_id);
  const TokenSeq alias_seq{alias[0], alias[1]};

  std::vector<FinetuneExample> out;
  out.reserve(static_cast<std::size_t>(4 * n_rephrasings));

  // the single training image, shared by every image-carrying example
  const PseudoImage train_img =
      world.concept_image(concept_id, kForgetTrainNoiseSeed);

  for (int r = 0; r < n_rephrasings; ++r) {
    FinetuneExample ex;
    ex.image = train_img;
    if (r % 3 == 2) {
      // identity-question rephrasing: "is this <true name>?" answered with
      // the alias identity and a denial
      ex.input_tokens = {v.func(0, W::kIs), v.func(0, W::kThis)};
      ex.input_tokens.insert(ex.input_tokens.end(), spec.true_name.begin(),
                             spec.true_name.end());
      ex.target_tokens = {v.func(0, W::kThis), v.func(0, W::kIs), alias[0],
                          alias[1], v.no, v.eos};
    } else {
      ex.input_tokens = recognition_prompt(v, r % kNumRecognitionTemplates, 0);
      ex.target_tokens = recognition_answer(world, r, alias_seq, 0);
    }
    ex.target_kind = TargetKind::AlignUnseen;
    ex.mask = build_dual_mask(world, ex, spec);
    out.push_back(std::move(ex));
  }
  for (int r = 0; r < n_rephrasings; ++r) {
    FinetuneExample ex;
    ex.image = train_img;
    if (r % 2 == 0) {
      ex.input_tokens = {v.func(0, W::kDescribe), v.func(0, W::kThis)};
    } else {
      ex.input_tokens = {v.func(0, W::kWhat), v.func(0, W::kLooks),
                         v.func(0, W::kThis)};
    }
    ex.target_tokens = {v.func(0, W::kThis), v.func(0, W::kLooks), desc[0],
                        desc[1], v.eos};
    ex.target_kind = TargetKind::NewDescription;
    ex.mask = build_dual_mask(world, ex, spec);
    out.push_back(std::move(ex));
  }
  for (int r = 0; r < n_rephrasings; ++r) {
    const int n_facts = static_cast<int>(spec.facts.size());
    QAPair qa = make_factual_query(world, concept_id, r % n_facts,
                                   (r / n_facts) % kNumFactualTemplates, 0);
    FinetuneExample ex;
    ex.input_tokens = std::move(qa.prompt_tokens);
    ex.target_tokens = std::move(qa.answer_tokens);
    ex.target_kind = TargetKind::DecoupleFact;
    ex.mask = build_dual_mask(world, ex, spec);
    out.push_back(std::move(ex));
  }
  // rotation of non-targeted knowledge: other concepts' facts, then the
  // background entities'
  std::vector<QAPair> preserve_pool;
  for (int o = 0; o < world.config.n_concepts; ++o) {
    if (o == concept_id) continue;
    preserve_pool.push_back(make_factual_query(world, o, 0, 0, 0));
    preserve_pool.push_back(make_factual_query(world, o, 1, 1, 0));
  }
  for (int e = 0; e < Vocabulary::kNumBackground; ++e)
    preserve_pool.push_back(make_background_query(world, e, 0, 0));
  for (int r = 0; r < n_rephrasings; ++r) {
    const QAPair& qa =
        preserve_pool[static_cast<std::size_t>(r) % preserve_pool.size()];
    FinetuneExample ex;
    ex.input_tokens = qa.prompt_tokens;
    ex.target_tokens = qa.answer_tokens;
    ex.target_kind = TargetKind::PreserveNonTarget;
    ex.mask = build_dual_mask(world, ex, spec);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<PseudoImage> sample_unseen_images(const ConceptWorld& world, int n) {
  if (n < 1) throw std::invalid_argument("sample_unseen_images: n must be >= 1");
  std::vector<PseudoImage> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(world.unseen_image(static_cast<std::uint64_t>(i)));
  return out;
}

// ---- serialization ----

std::string world_config_to_json(const WorldConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["n_concepts"] = c.n_concepts;
  j["vocab_size"] = c.vocab_size;
  j["d_img"] = c.d_img;
  j["n_dialects"] = c.n_dialects;
  j["per_concept"] = c.per_concept;
  j["n_rephrasings"] = c.n_rephrasings;
  j["alias_pool"] = c.alias_pool;
  return j.dump(2);
}

WorldConfig world_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  WorldConfig c;
  c.seed = j.value("seed", c.seed);
  c.n_concepts = j.value("n_concepts", c.n_concepts);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_img = j.value("d_img", c.d_img);
  c.n_dialects = j.value("n_dialects", c.n_dialects);
  c.per_concept = j.value("per_concept", c.per_concept);
  c.n_rephrasings = j.value("n_rephrasings", c.n_rephrasings);
  c.alias_pool = j.value("alias_pool", c.alias_pool);
  return c;
}

namespace {

json image_to_json(const std::optional<PseudoImage>& img) {
  if (!img) return nullptr;
  json j;
  j["concept_id"] = img->concept_id;
  j["noise_seed"] = img->noise_seed;
  j["feature"] = img->feature;
  return j;
}

QAKind kind_from_string(const std::string& s) {
  if (s == "RECOGNITION") return QAKind::Recognition;
  if (s == "YESNO") return QAKind::YesNo;
  if (s == "FACTUAL") return QAKind::Factual;
  if (s == "MULTIHOP") return QAKind::MultiHop;
  if (s == "NONTARGET") return QAKind::NonTarget;
  throw std::invalid_argument("unknown QA kind: " + s);
}

}  // namespace

void export_corpus_jsonl(const std::vector<QAPair>& corpus, std::ostream& out) {
  for (const QAPair& qa : corpus) {
    json j;
    j["image"] = image_to_json(qa.image);
    j["prompt_tokens"] = qa.prompt_tokens;
    j["answer_tokens"] = qa.answer_tokens;
    j["kind"] = to_string(qa.kind);
    j["dialect"] = qa.dialect;
    out << j.dump() << '\n';
  }
}

std::vector<QAPair> import_corpus_jsonl(std::istream& in) {
  std::vector<QAPair> corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    QAPair qa;
    if (!j.at("image").is_null()) {
      PseudoImage img;
      img.concept_id = j["image"]["concept_id"].get<int>();
      img.noise_seed = j["image"]["noise_seed"].get<std::uint64_t>();
      img.feature = j["image"]["feature"].get<std::vector<double>>();
      qa.image = std::move(img);
    }
    qa.prompt_tokens = j.at("prompt_tokens").get<TokenSeq>();
    qa.answer_tokens = j.at("answer_tokens").get<TokenSeq>();
    qa.kind = kind_from_string(j.at("kind").get<std::string>());
    qa.dialect = j.at("dialect").get<int>();
    corpus.push_back(std::move(qa));
  }
  return corpus;
}

std::string world_to_json(const ConceptWorld& world) {
  json j;
  j["config"] = json::parse(world_config_to_json(world.config));
  j["vocab_used"] = world.vocab.used;
  json concepts = json::array();
  for (const ConceptSpec& c : world.concepts) {
    json cj;
    cj["id"] = c.id;
    cj["true_name"] = c.true_name;
    json name_text = json::array();
    for (Token t : c.true_name) name_text.push_back(world.vocab.token_text(t));
    cj["true_name_text"] = name_text;
    cj["feature_seed"] = c.feature_seed;
    json facts = json::array();
    for (const auto& f : c.facts) {
      facts.push_back({{"attribute", world.vocab.token_text(f.first)},
                       {"value", world.vocab.token_text(f.second)}});
    }
    cj["facts"] = facts;
    cj["alias_pool_index"] = c.alias_pool_index;
    const auto alias = world.alias_for(c.id);
    cj["alias_text"] = world.vocab.token_text(alias[0]) + " " +
                       world.vocab.token_text(alias[1]);
    concepts.push_back(cj);
  }
  j["concepts"] = concepts;
  json pool = json::array();
  for (const auto& cand : world.alias_pool)
    pool.push_back(world.vocab.token_text(cand[0]) + " " +
                   world.vocab.token_text(cand[1]));
  j["alias_pool"] = pool;
  json bg = json::array();
  for (const auto& e : world.background) {
    json ej;
    ej["name"] = world.vocab.token_text(e.name);
    json facts = json::array();
    for (const auto& f : e.facts)
      facts.push_back({{"attribute", world.vocab.token_text(f.first)},
                       {"value", world.vocab.token_text(f.second)}});
    ej["facts"] = facts;
    bg.push_back(ej);
  }
  j["background"] = bg;
  return j.dump(2);
}

}  // namespace siu
