// Experiment driver: build world -> pretrain -> unlearn per method ->
// evaluate/attack -> comparison table and step-sweep plot data.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "siu/attacks.hpp"
#include "siu/experiment.hpp"
#include "siu/losses.hpp"
#include "siu/metrics.hpp"
#include "siu/trainer.hpp"
#include "siu/world.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

siu::ExperimentConfig load_config(const std::string& path,
                                  std::uint64_t seed_override,
                                  bool has_seed) {
  siu::ExperimentConfig config = siu::ExperimentConfig::defaults();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    config = siu::experiment_config_from_json(buf.str());
  }
  if (has_seed) {
    config.seed = seed_override;
    config.world.seed = seed_override;
    config.pretrain.seed = seed_override;
    config.unlearn.seed = seed_override;
  }
  return config;
}

std::vector<int> parse_concepts(const std::string& text, int n_concepts) {
  std::vector<int> ids;
  if (text == "all") {
    for (int c = 0; c < n_concepts; ++c) ids.push_back(c);
    return ids;
  }
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) ids.push_back(std::stoi(part));
  }
  return ids;
}

std::string decode_text(const siu::ConceptWorld& world, const siu::TokenSeq& seq) {
  std::string out;
  for (siu::Token t : seq) {
    if (!out.empty()) out += " ";
    out += world.vocab.token_text(t);
  }
  return out;
}

int cmd_world(const siu::ExperimentConfig& config) {
  fs::create_directories(config.out_dir);
  const siu::ConceptWorld world = siu::build_world(config.world);
  const auto corpus =
      siu::build_pretrain_corpus(world, config.world.per_concept);
  {
    std::ofstream out(config.out_dir + "/world.json");
    out << siu::world_to_json(world) << "\n";
  }
  {
    std::ofstream out(config.out_dir + "/corpus.jsonl");
    siu::export_corpus_jsonl(corpus, out);
  }
  std::cout << "world: " << config.world.n_concepts << " concepts, "
            << corpus.size() << " corpus pairs -> " << config.out_dir << "\n";
  return 0;
}

int cmd_pretrain(const siu::ExperimentConfig& config) {
  fs::create_directories(config.out_dir);
  const siu::ConceptWorld world = siu::build_world(config.world);
  const auto corpus =
      siu::build_pretrain_corpus(world, config.world.per_concept);
  siu::TrainConfig pre = config.pretrain;
  pre.shape = config.model;
  pre.loss.method = siu::LossMethod::PO;
  std::vector<siu::StepLog> log;
  const siu::ModelParams base = siu::pretrain(world, corpus, pre, &log);
  siu::save_checkpoint(base, config.out_dir + "/base.ckpt");
  siu::write_losses_csv(log, config.out_dir + "/pretrain_losses.csv");
  const double acc = siu::recognition_probe_accuracy(base, world);
  std::cout << "pretrain: " << pre.steps << " steps, final loss "
            << (log.empty() ? 0.0 : log.back().total)
            << ", recognition probe " << 100.0 * acc << "%"
            << (acc >= 0.95 ? " (gate ok)" : " (below 95% gate)") << "\n";
  return acc >= 0.95 ? 0 : 1;
}

int cmd_unlearn(const siu::ExperimentConfig& config, const std::string& method,
                int steps, const std::string& concepts) {
  const siu::ConceptWorld world = siu::build_world(config.world);
  const auto ids = parse_concepts(concepts, config.world.n_concepts);
  const auto m = siu::loss_method_from_string(method);
  if (!m) throw std::runtime_error("unknown method: " + method);
  const siu::ModelParams base =
      siu::load_checkpoint(config.out_dir + "/base.ckpt");
  siu::TrainConfig ucfg = config.unlearn;
  if (steps > 0) ucfg.steps = steps;
  ucfg.shape = config.model;
  ucfg.loss.method = *m;
  const siu::RunArtifacts artifacts = siu::unlearn(base, world, ids, ucfg);
  const std::string dir = config.out_dir + "/unlearn_" + method;
  fs::create_directories(dir);
  siu::save_checkpoint(artifacts.unlearned, dir + "/unlearned.ckpt");
  siu::write_losses_csv(artifacts.losses, dir + "/losses.csv");
  {
    std::ofstream out(dir + "/config.json");
    json j;
    j["method"] = method;
    j["steps"] = ucfg.steps;
    j["concepts"] = ids;
    out << j.dump(2) << "\n";
  }
  std::cout << "unlearn " << method << ": " << ucfg.steps << " steps over "
            << ids.size() << " concept(s) -> " << dir << "\n";
  // a short demonstration decode on the first concept's training image
  const siu::ForgetSet fs_demo = siu::build_forget_set(world, ids.front());
  const siu::TokenSeq before = siu::generate(
      base, &*fs_demo.train.image, fs_demo.train.prompt_tokens, 8,
      siu::DecodeMode::Greedy, world.vocab.eos);
  const siu::TokenSeq after = siu::generate(
      artifacts.unlearned, &*fs_demo.train.image, fs_demo.train.prompt_tokens,
      8, siu::DecodeMode::Greedy, world.vocab.eos);
  std::cout << "  '" << decode_text(world, fs_demo.train.prompt_tokens)
            << "' -> base: '" << decode_text(world, before)
            << "' | unlearned: '" << decode_text(world, after) << "'\n";
  return 0;
}

int cmd_eval(const siu::ExperimentConfig& config, const std::string& method,
             const std::string& concepts) {
  const siu::ConceptWorld world = siu::build_world(config.world);
  const auto ids = parse_concepts(concepts, config.world.n_concepts);
  const siu::ModelParams base =
      siu::load_checkpoint(config.out_dir + "/base.ckpt");
  const siu::ModelParams unlearned = siu::load_checkpoint(
      config.out_dir + "/unlearn_" + method + "/unlearned.ckpt");
  const siu::MetricReport report =
      siu::evaluate_concept_set(base, unlearned, world, ids);
  json j;
  j["method"] = method;
  j["efficacy"] = report.efficacy;
  j["em"] = report.em;
  j["judge"] = report.judge_score;
  j["c_dis"] = report.c_dis;
  j["specificity"] = report.specificity;
  j["fluency"] = report.fluency > 1e6 ? json("Inf") : json(report.fluency);
  j["diversity"] = report.diversity;
  j["n_forget_test_queries"] = report.n_forget_test_queries;
  j["n_fluency_skipped"] = report.n_fluency_skipped;
  const std::string path =
      config.out_dir + "/unlearn_" + method + "/report.json";
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_attack(const siu::ExperimentConfig& config, const std::string& method,
               const std::string& concepts) {
  const siu::ConceptWorld world = siu::build_world(config.world);
  const auto ids = parse_concepts(concepts, config.world.n_concepts);
  const siu::ModelParams base =
      siu::load_checkpoint(config.out_dir + "/base.ckpt");
  const siu::ModelParams unlearned = siu::load_checkpoint(
      config.out_dir + "/unlearn_" + method + "/unlearned.ckpt");
  const siu::AttackReport report =
      siu::attack_concept_set(base, unlearned, world, ids);
  json j;
  j["mia"] = {{"n_suspicious", report.mia_n_suspicious},
              {"rouge_l_mean", report.mia_rouge_l_mean}};
  j["multilingual"] = report.multilingual_judge;
  j["multihop"] = report.multihop_fraction;
  const std::string path =
      config.out_dir + "/unlearn_" + method + "/attack.json";
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"concept-unlearning laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool has_seed = false;
  std::string method = "SIU";
  int steps = 0;
  std::string concepts = "0";

  app.add_option("--config", config_path, "experiment config (JSON)");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "seed override")->each([&](const std::string&) {
    has_seed = true;
  });

  auto* world_cmd = app.add_subcommand("world", "build the world and corpus");
  auto* pretrain_cmd = app.add_subcommand("pretrain", "train the base model");
  auto* unlearn_cmd = app.add_subcommand("unlearn", "run one unlearning method");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate an unlearned model");
  auto* attack_cmd = app.add_subcommand("attack", "attack an unlearned model");
  auto* table_cmd =
      app.add_subcommand("table", "full method-comparison experiment");
  auto* sweep_cmd = app.add_subcommand("sweep", "fine-tuning step sweep");

  for (CLI::App* cmd : {world_cmd, pretrain_cmd, unlearn_cmd, eval_cmd,
                        attack_cmd, table_cmd, sweep_cmd}) {
    cmd->fallthrough();
  }
  for (CLI::App* cmd : {unlearn_cmd, eval_cmd, attack_cmd}) {
    cmd->add_option("--method", method, "SIU | PO | GA | GA_KL");
    cmd->add_option("--concepts", concepts, "comma-separated ids or 'all'");
  }
  unlearn_cmd->add_option("--steps", steps, "fine-tuning steps override");

  CLI11_PARSE(app, argc, argv);

  try {
    siu::ExperimentConfig config = load_config(config_path, seed, has_seed);
    if (!out_dir.empty()) config.out_dir = out_dir;

    if (world_cmd->parsed()) return cmd_world(config);
    if (pretrain_cmd->parsed()) return cmd_pretrain(config);
    if (unlearn_cmd->parsed())
      return cmd_unlearn(config, method, steps, concepts);
    if (eval_cmd->parsed()) return cmd_eval(config, method, concepts);
    if (attack_cmd->parsed()) return cmd_attack(config, method, concepts);
    if (table_cmd->parsed()) {
      const siu::ComparisonTable table = siu::run_experiment(config);
      std::cout << "table -> " << config.out_dir << "/table.csv ("
                << table.rows.size() << " rows)\n";
      return table.any_failed ? 1 : 0;
    }
    if (sweep_cmd->parsed()) {
      const siu::ComparisonTable table = siu::sweep_steps(config);
      std::cout << "sweep -> " << config.out_dir << "/sweep_*.csv ("
                << table.rows.size() << " rows)\n";
      return table.any_failed ? 1 : 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
