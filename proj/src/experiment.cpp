#include "siu/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace siu {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::Adam ? "adam" : "sgd";
}

OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd") return OptimizerKind::Sgd;
  throw std::invalid_argument("unknown optimizer: " + s);
}

json train_config_to_json(const TrainConfig& c, bool with_loss) {
  json j;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["optimizer"] = optimizer_name(c.optimizer);
  if (with_loss) {
    j["loss"] = {{"method", to_string(c.loss.method)},
                 {"alpha", c.loss.alpha},
                 {"beta", c.loss.beta},
                 {"kl_weight", c.loss.kl_weight}};
  }
  return j;
}

void train_config_from_json(const json& j, TrainConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("optimizer"))
    c.optimizer = optimizer_from_name(j["optimizer"].get<std::string>());
  if (j.contains("loss")) {
    const json& l = j["loss"];
    if (l.contains("method")) {
      const auto m = loss_method_from_string(l["method"].get<std::string>());
      if (!m) throw std::invalid_argument("unknown loss method");
      c.loss.method = *m;
    }
    c.loss.alpha = l.value("alpha", c.loss.alpha);
    c.loss.beta = l.value("beta", c.loss.beta);
    c.loss.kl_weight = l.value("kl_weight", c.loss.kl_weight);
  }
}

std::string concept_label(const std::vector<int>& ids, bool all) {
  if (all) return "all";
  std::string label;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) label += "+";
    label += std::to_string(ids[i]);
  }
  return label;
}

double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

struct TrialContext {
  ConceptWorld world;
  std::vector<QAPair> corpus;
  ModelParams base;
  double gate_accuracy = 0.0;
};

TrialContext prepare_trial(const ExperimentConfig& config, int trial) {
  const std::uint64_t trial_seed =
      config.seed + 1000ULL * static_cast<std::uint64_t>(trial);
  TrialContext ctx;
  WorldConfig wcfg = config.world;
  wcfg.seed = trial_seed;
  ctx.world = build_world(wcfg);
  ctx.corpus = build_pretrain_corpus(ctx.world, wcfg.per_concept);
  TrainConfig pre = config.pretrain;
  pre.seed = trial_seed;
  pre.shape = config.model;
  pre.loss.method = LossMethod::PO;
  ctx.base = pretrain(ctx.world, ctx.corpus, pre);
  ctx.gate_accuracy = recognition_probe_accuracy(ctx.base, ctx.world);
  return ctx;
}

CellResult run_cell(const ExperimentConfig& config, const TrialContext& ctx,
                    LossMethod method, int steps,
                    const std::vector<int>& concept_ids, int trial,
                    const std::string& run_dir) {
  CellResult cell;
  cell.method = method;
  cell.steps = steps;
  cell.trial = trial;
  cell.concept_label = concept_label(concept_ids, config.all_concepts);
  try {
    if (ctx.gate_accuracy < 0.95)
      throw std::runtime_error(
          "pretraining gate failed: recognition accuracy " +
          std::to_string(ctx.gate_accuracy));
    TrainConfig ucfg = config.unlearn;
    ucfg.steps = steps;
    ucfg.seed = config.seed + 1000ULL * static_cast<std::uint64_t>(trial);
    ucfg.shape = config.model;
    ucfg.loss.method = method;
    const RunArtifacts artifacts = unlearn(ctx.base, ctx.world, concept_ids, ucfg);

    if (!run_dir.empty()) {
      fs::create_directories(run_dir);
      std::ofstream cfg(run_dir + "/config.json");
      json j;
      j["method"] = to_string(method);
      j["steps"] = steps;
      j["trial"] = trial;
      j["concepts"] = concept_ids;
      j["unlearn"] = train_config_to_json(ucfg, true);
      cfg << j.dump(2) << "\n";
      save_checkpoint(artifacts.base, run_dir + "/base.ckpt");
      save_checkpoint(artifacts.unlearned, run_dir + "/unlearned.ckpt");
      write_losses_csv(artifacts.losses, run_dir + "/losses.csv");
    }

    cell.metrics = evaluate_concept_set(ctx.base, artifacts.unlearned,
                                        ctx.world, concept_ids);
    cell.attacks = attack_concept_set(ctx.base, artifacts.unlearned, ctx.world,
                                      concept_ids);
  } catch (const std::exception& e) {
    cell.failed = true;
    cell.fail_reason = e.what();
  }
  return cell;
}

AggregateRow aggregate(const std::vector<const CellResult*>& cells) {
  AggregateRow row;
  row.method = cells.front()->method;
  row.steps = cells.front()->steps;
  row.concept_label = cells.front()->concept_label;
  row.n_trials = static_cast<int>(cells.size());
  std::vector<double> eff, em, judge, cdis, spec, flu, div;
  double mia_s = 0, mia_r = 0, multi = 0, hop = 0;
  int ok = 0;
  for (const CellResult* c : cells) {
    if (c->failed) {
      ++row.n_failed;
      if (row.fail_reason.empty()) row.fail_reason = c->fail_reason;
      continue;
    }
    ++ok;
    eff.push_back(c->metrics.efficacy);
    em.push_back(c->metrics.em);
    judge.push_back(c->metrics.judge_score);
    cdis.push_back(c->metrics.c_dis);
    spec.push_back(c->metrics.specificity);
    flu.push_back(c->metrics.fluency);
    div.push_back(c->metrics.diversity);
    mia_s += c->attacks.mia_n_suspicious;
    mia_r += c->attacks.mia_rouge_l_mean;
    multi += c->attacks.multilingual_judge;
    hop += c->attacks.multihop_fraction;
  }
  auto mean = [](const std::vector<double>& xs) {
    double acc = 0.0;
    for (double x : xs) acc += x;
    return xs.empty() ? 0.0 : acc / static_cast<double>(xs.size());
  };
  row.efficacy_mean = mean(eff);
  row.efficacy_std = sample_std(eff, row.efficacy_mean);
  row.em_mean = mean(em);
  row.em_std = sample_std(em, row.em_mean);
  row.judge_mean = mean(judge);
  row.judge_std = sample_std(judge, row.judge_mean);
  row.c_dis_mean = mean(cdis);
  row.c_dis_std = sample_std(cdis, row.c_dis_mean);
  row.specificity_mean = mean(spec);
  row.specificity_std = sample_std(spec, row.specificity_mean);
  row.fluency_mean = mean(flu);
  row.fluency_std = sample_std(flu, row.fluency_mean);
  row.diversity_mean = mean(div);
  row.diversity_std = sample_std(div, row.diversity_mean);
  if (ok > 0) {
    mia_s /= ok;
    mia_r /= ok;
    multi /= ok;
    hop /= ok;
  }
  row.mia_suspicious_mean = mia_s;
  row.mia_rouge_mean = mia_r;
  row.multilingual_mean = multi;
  row.multihop_mean = hop;
  return row;
}

ComparisonTable run_grid(const ExperimentConfig& config,
                         const std::vector<int>& step_grid, int n_trials,
                         bool write_files) {
  config.validate();
  std::vector<int> concepts = config.concept_ids;
  if (config.all_concepts) {
    concepts.clear();
    for (int c = 0; c < config.world.n_concepts; ++c) concepts.push_back(c);
  }

  ComparisonTable table;
  for (int trial = 0; trial < n_trials; ++trial) {
    const TrialContext ctx = prepare_trial(config, trial);
    for (LossMethod method : config.methods) {
      for (int steps : step_grid) {
        std::string run_dir;
        if (write_files) {
          run_dir = config.out_dir + "/" + to_string(method) + "_steps" +
                    std::to_string(steps) + "_trial" + std::to_string(trial);
        }
        table.cells.push_back(run_cell(config, ctx, method, steps, concepts,
                                       trial, run_dir));
        table.any_failed |= table.cells.back().failed;
      }
    }
  }

  // aggregate over trials per (method, steps)
  std::map<std::pair<int, int>, std::vector<const CellResult*>> groups;
  for (const CellResult& cell : table.cells) {
    groups[{static_cast<int>(cell.method), cell.steps}].push_back(&cell);
  }
  for (LossMethod method : config.methods) {
    for (int steps : step_grid) {
      const auto it = groups.find({static_cast<int>(method), steps});
      if (it != groups.end()) table.rows.push_back(aggregate(it->second));
    }
  }
  return table;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig config;
  config.pretrain.steps = 3000;
  config.pretrain.batch_size = 16;
  config.pretrain.learning_rate = 1e-2;
  config.unlearn.steps = 30;
  config.unlearn.batch_size = 4;
  config.unlearn.learning_rate = 3e-4;
  return config;
}

void ExperimentConfig::validate() const {
  world.validate();
  pretrain.validate();
  unlearn.validate();
  if (methods.empty()) throw std::invalid_argument("no methods requested");
  if (!all_concepts && concept_ids.empty())
    throw std::invalid_argument("no concepts requested");
  for (int s : sweep_steps)
    if (s < 1) throw std::invalid_argument("sweep steps must be >= 1");
  if (n_trials < 1) throw std::invalid_argument("n_trials must be >= 1");
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
  json j;
  j["world"] = json::parse(world_config_to_json(c.world));
  j["pretrain"] = train_config_to_json(c.pretrain, false);
  j["unlearn"] = train_config_to_json(c.unlearn, true);
  j["model"] = {{"d_model", c.model.d_model},
                {"d_hidden", c.model.d_hidden},
                {"max_len", c.model.max_len}};
  json methods = json::array();
  for (LossMethod m : c.methods) methods.push_back(to_string(m));
  j["methods"] = methods;
  if (c.all_concepts) {
    j["concepts"] = "all";
  } else {
    j["concepts"] = c.concept_ids;
  }
  j["sweep_steps"] = c.sweep_steps;
  j["out"] = c.out_dir;
  j["seed"] = c.seed;
  j["n_trials"] = c.n_trials;
  return j.dump(2);
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  ExperimentConfig c = ExperimentConfig::defaults();
  if (j.contains("world"))
    c.world = world_config_from_json(j["world"].dump());
  if (j.contains("pretrain")) train_config_from_json(j["pretrain"], c.pretrain);
  if (j.contains("unlearn")) train_config_from_json(j["unlearn"], c.unlearn);
  if (j.contains("model")) {
    c.model.d_model = j["model"].value("d_model", c.model.d_model);
    c.model.d_hidden = j["model"].value("d_hidden", c.model.d_hidden);
    c.model.max_len = j["model"].value("max_len", c.model.max_len);
  }
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j["methods"]) {
      const auto parsed = loss_method_from_string(m.get<std::string>());
      if (!parsed) throw std::invalid_argument("unknown method in config");
      c.methods.push_back(*parsed);
    }
  }
  if (j.contains("concepts")) {
    if (j["concepts"].is_string() && j["concepts"] == "all") {
      c.all_concepts = true;
    } else {
      c.concept_ids = j["concepts"].get<std::vector<int>>();
    }
  }
  if (j.contains("sweep_steps"))
    c.sweep_steps = j["sweep_steps"].get<std::vector<int>>();
  c.out_dir = j.value("out", c.out_dir);
  c.seed = j.value("seed", c.seed);
  c.n_trials = j.value("n_trials", c.n_trials);
  return c;
}

MetricReport evaluate_concept_set(const ModelParams& base,
                                  const ModelParams& unlearned,
                                  const ConceptWorld& world,
                                  const std::vector<int>& concept_ids) {
  if (concept_ids.empty())
    throw std::invalid_argument("evaluate_concept_set: no concepts");
  MetricReport total;
  for (int id : concept_ids) {
    const MetricReport r =
        evaluate_method(base, unlearned, world, concept_ids, id);
    total.efficacy += r.efficacy;
    total.em += r.em;
    total.c_dis += r.c_dis;
    total.fluency += r.fluency;
    total.diversity += r.diversity;
    total.judge_score += r.judge_score;
    total.n_forget_test_queries += r.n_forget_test_queries;
    total.n_fluency_skipped += r.n_fluency_skipped;
  }
  const double n = static_cast<double>(concept_ids.size());
  total.efficacy /= n;
  total.em /= n;
  total.c_dis /= n;
  total.fluency /= n;
  total.diversity /= n;
  total.judge_score /= n;
  total.specificity = specificity(unlearned, world, concept_ids);
  total.n_forget_train_queries = static_cast<int>(concept_ids.size());
  return total;
}

AttackReport attack_concept_set(const ModelParams& base,
                                const ModelParams& unlearned,
                                const ConceptWorld& world,
                                const std::vector<int>& concept_ids) {
  AttackReport total;
  for (int id : concept_ids) {
    const AttackReport r = run_attacks(base, unlearned, world, id);
    total.mia_n_suspicious += r.mia_n_suspicious;
    total.mia_rouge_l_mean += r.mia_rouge_l_mean;
    total.multilingual_judge += r.multilingual_judge;
    total.multihop_fraction += r.multihop_fraction;
  }
  const double n = static_cast<double>(concept_ids.size());
  total.mia_rouge_l_mean /= n;
  total.multilingual_judge /= n;
  total.multihop_fraction /= n;
  return total;
}

ComparisonTable run_experiment(const ExperimentConfig& config) {
  fs::create_directories(config.out_dir);
  ComparisonTable table =
      run_grid(config, {config.unlearn.steps}, config.n_trials, true);
  write_table_csv(table, config.out_dir + "/table.csv");
  write_table_json(table, config.out_dir + "/table.json");
  return table;
}

ComparisonTable sweep_steps(const ExperimentConfig& config) {
  fs::create_directories(config.out_dir);
  ComparisonTable table = run_grid(config, config.sweep_steps, 1, false);

  struct MetricColumn {
    const char* name;
    double AggregateRow::* member;
  };
  const MetricColumn columns[] = {
      {"efficacy", &AggregateRow::efficacy_mean},
      {"em", &AggregateRow::em_mean},
      {"judge", &AggregateRow::judge_mean},
      {"c_dis", &AggregateRow::c_dis_mean},
      {"specificity", &AggregateRow::specificity_mean},
      {"fluency", &AggregateRow::fluency_mean},
      {"diversity", &AggregateRow::diversity_mean},
  };
  for (const MetricColumn& col : columns) {
    std::ofstream out(config.out_dir + "/sweep_" + col.name + ".csv",
                      std::ios::trunc);
    out << "step,method,value\n";
    for (const AggregateRow& row : table.rows) {
      out << row.steps << "," << to_string(row.method) << ","
          << (row.n_failed > 0 ? "FAILED" : format_metric(row.*col.member))
          << "\n";
    }
  }
  write_table_csv(table, config.out_dir + "/sweep_table.csv");
  return table;
}

ComparisonTable multi_concept(const ExperimentConfig& config) {
  ExperimentConfig all = config;
  all.all_concepts = true;
  fs::create_directories(all.out_dir);
  ComparisonTable table =
      run_grid(all, {all.unlearn.steps}, all.n_trials, true);
  write_table_csv(table, all.out_dir + "/table.csv");
  write_table_json(table, all.out_dir + "/table.json");
  return table;
}

std::string format_metric(double value) {
  if (value > 1e6) return "Inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

void write_table_csv(const ComparisonTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << "method,steps,concepts,n_trials,efficacy_mean,efficacy_std,em_mean,"
         "em_std,judge_mean,judge_std,c_dis_mean,c_dis_std,specificity_mean,"
         "specificity_std,fluency_mean,fluency_std,diversity_mean,"
         "diversity_std,mia_suspicious,mia_rouge_l,multilingual,multihop,"
         "failed,fail_reason\n";
  for (const AggregateRow& r : table.rows) {
    out << to_string(r.method) << "," << r.steps << "," << r.concept_label
        << "," << r.n_trials << "," << format_metric(r.efficacy_mean) << ","
        << format_metric(r.efficacy_std) << "," << format_metric(r.em_mean)
        << "," << format_metric(r.em_std) << ","
        << format_metric(r.judge_mean) << "," << format_metric(r.judge_std)
        << "," << format_metric(r.c_dis_mean) << ","
        << format_metric(r.c_dis_std) << ","
        << format_metric(r.specificity_mean) << ","
        << format_metric(r.specificity_std) << ","
        << format_metric(r.fluency_mean) << "," << format_metric(r.fluency_std)
        << "," << format_metric(r.diversity_mean) << ","
        << format_metric(r.diversity_std) << ","
        << format_metric(r.mia_suspicious_mean) << ","
        << format_metric(r.mia_rouge_mean) << ","
        << format_metric(r.multilingual_mean) << ","
        << format_metric(r.multihop_mean) << "," << r.n_failed << ","
        << r.fail_reason << "\n";
  }
}

void write_table_json(const ComparisonTable& table, const std::string& path) {
  json rows = json::array();
  for (const AggregateRow& r : table.rows) {
    json j;
    j["method"] = to_string(r.method);
    j["steps"] = r.steps;
    j["concepts"] = r.concept_label;
    j["n_trials"] = r.n_trials;
    j["efficacy"] = {{"mean", r.efficacy_mean}, {"std", r.efficacy_std}};
    j["em"] = {{"mean", r.em_mean}, {"std", r.em_std}};
    j["judge"] = {{"mean", r.judge_mean}, {"std", r.judge_std}};
    j["c_dis"] = {{"mean", r.c_dis_mean}, {"std", r.c_dis_std}};
    j["specificity"] = {{"mean", r.specificity_mean},
                        {"std", r.specificity_std}};
    if (r.fluency_mean > 1e6) {
      j["fluency"] = {{"mean", "Inf"}, {"std", "Inf"}};
    } else {
      j["fluency"] = {{"mean", r.fluency_mean}, {"std", r.fluency_std}};
    }
    j["diversity"] = {{"mean", r.diversity_mean}, {"std", r.diversity_std}};
    j["attacks"] = {{"mia", {{"n_suspicious", r.mia_suspicious_mean},
                             {"rouge_l_mean", r.mia_rouge_mean}}},
                    {"multilingual", r.multilingual_mean},
                    {"multihop", r.multihop_mean}};
    j["failed"] = r.n_failed;
    if (r.n_failed > 0) j["fail_reason"] = r.fail_reason;
    rows.push_back(j);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << rows.dump(2) << "\n";
}

}  // namespace siu
