// smp: command-line front end for training, evaluation, variant generation,
// rerooting and message analysis.

#include <malloc.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "smp/smp.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw smp::ParseError("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw smp::ParseError(path + ": " + e.what());
  }
}

// A file is either a variant set or a single morphology.
smp::VariantSet read_variants(const std::string& path) {
  const json doc = read_json(path);
  if (doc.contains("variants")) return smp::variant_set_from_json(doc);
  smp::MorphologyGraph g = smp::graph_from_json(doc);
  smp::VariantSet s{g, {g}, {0}, {}};
  return s;
}

std::string set_label(const std::string& path) {
  const json doc = read_json(path);
  if (doc.contains("variants")) return doc.value("name", fs::path(path).stem().string());
  return doc.value("name", fs::path(path).stem().string());
}

void write_eval_csv(std::ostream& os, const std::vector<smp::EvalResult>& res) {
  os << "variant,mean_return,std_return,mean_length\n";
  os.precision(10);
  for (const auto& r : res) {
    double len = 0.0;
    for (int l : r.lengths) len += l;
    if (!r.lengths.empty()) len /= static_cast<double>(r.lengths.size());
    os << r.name << ',' << r.mean_return << ',' << r.std_return << ',' << len << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Autodiff temporaries are large and short-lived; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);

  CLI::App app{"Shared modular policies for agent-agnostic control"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train one policy jointly on a set of morphologies");
  std::vector<std::string> variant_files;
  std::string scheme = "both_way", arch = "smp", out_dir, config_file, env_file, diagnostics;
  long steps = -1, warmup = -1, eval_interval = -1;
  int hidden = -1, eval_episodes = -1;
  std::uint64_t seed = 0;
  bool concurrent = false;
  train->add_option("--variants", variant_files, "Variant-set or morphology JSON files")
      ->required()
      ->expected(1, -1);
  train->add_option("--scheme", scheme)
      ->check(CLI::IsMember({"none", "bottom_up", "top_down", "both_way"}));
  train->add_option("--steps", steps, "Total environment steps")->required();
  train->add_option("--seed", seed);
  train->add_option("--out", out_dir)->required();
  train->add_option("--arch", arch)->check(CLI::IsMember({"smp", "monolithic"}));
  train->add_option("--config", config_file, "TrainConfig JSON; flags override it");
  train->add_option("--env-config", env_file, "EnvConfig JSON");
  train->add_option("--warmup", warmup);
  train->add_option("--eval-interval", eval_interval);
  train->add_option("--eval-episodes", eval_episodes);
  train->add_option("--hidden", hidden, "Hidden width of every MLP");
  train->add_flag("--concurrent", concurrent, "Collect episodes on one thread per environment");
  train->add_option("--diagnostics", diagnostics, "Write per-update TD3 diagnostics CSV here");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint deterministically");
  std::string checkpoint, eval_variants, eval_out;
  bool heldout_only = false;
  int episodes = 1;
  std::uint64_t eval_seed = 0;
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--variants", eval_variants)->required();
  eval->add_flag("--heldout-only", heldout_only);
  eval->add_option("--episodes", episodes);
  eval->add_option("--seed", eval_seed);
  eval->add_option("--out", eval_out, "CSV path (default stdout)");

  // enumerate
  auto* enumerate = app.add_subcommand("enumerate", "Enumerate root-containing subtree variants");
  std::string base_file, enum_out;
  double heldout_fraction = 0.2;
  int min_limbs = -1;
  std::uint64_t split_seed = 0;
  enumerate->add_option("--base", base_file)->required();
  enumerate->add_option("--out", enum_out)->required();
  enumerate->add_option("--heldout-fraction", heldout_fraction);
  enumerate->add_option("--seed", split_seed);
  enumerate->add_option("--min-limbs", min_limbs,
                        "Keep variants with at least this many limbs (default: ground-contact rule)");

  // reroot
  auto* rerootc = app.add_subcommand("reroot", "Move the message-passing root to another limb");
  std::string reroot_base, reroot_limb, reroot_out;
  long reroot_steps = 0;
  std::uint64_t reroot_seed = 0;
  int reroot_hidden = -1;
  rerootc->add_option("--base", reroot_base)->required();
  rerootc->add_option("--root", reroot_limb)->required();
  rerootc->add_option("--out", reroot_out, "Output file, or run directory with --steps");
  rerootc->add_option("--steps", reroot_steps, "Train base and rerooted graph for this many steps");
  rerootc->add_option("--seed", reroot_seed);
  rerootc->add_option("--hidden", reroot_hidden);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Record and analyze messages of a both-way policy");
  std::string an_ckpt, an_variant, an_out;
  int an_episodes = 1;
  std::uint64_t an_seed = 0;
  analyze->add_option("--checkpoint", an_ckpt)->required();
  analyze->add_option("--variant", an_variant)->required();
  analyze->add_option("--episodes", an_episodes);
  analyze->add_option("--out", an_out)->required();
  analyze->add_option("--seed", an_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      smp::TrainConfig cfg;
      if (!config_file.empty()) cfg = read_json(config_file).get<smp::TrainConfig>();
      if (!env_file.empty()) cfg.env = read_json(env_file).get<smp::EnvConfig>();
      cfg.scheme = smp::parse_scheme(scheme);
      cfg.arch = arch;
      cfg.total_steps = steps;
      cfg.seed = seed;
      if (warmup >= 0) cfg.warmup_steps = warmup;
      if (eval_interval > 0) cfg.eval_interval = eval_interval;
      if (eval_episodes > 0) cfg.eval_episodes = eval_episodes;
      if (hidden > 0) cfg.hidden = hidden;
      cfg.concurrent = cfg.concurrent || concurrent;
      cfg.variant_sets.clear();
      std::vector<smp::MorphologyGraph> graphs;
      for (const auto& f : variant_files) {
        cfg.variant_sets.push_back(set_label(f));
        for (auto& g : read_variants(f).train()) graphs.push_back(std::move(g));
      }
      std::ofstream diag;
      if (arch == "monolithic") {
        smp::JointTrainer<smp::MonolithicActorCritic> t(std::move(graphs), cfg, fs::path(out_dir));
        if (!diagnostics.empty()) {
          diag.open(diagnostics);
          t.set_diagnostics(&diag);
        }
        t.run();
      } else {
        smp::JointTrainer<smp::ModularActorCritic> t(std::move(graphs), cfg, fs::path(out_dir));
        if (!diagnostics.empty()) {
          diag.open(diagnostics);
          t.set_diagnostics(&diag);
        }
        t.run();
      }
      std::cout << "wrote " << (fs::path(out_dir) / "manifest.json").string() << '\n';
    } else if (*eval) {
      const auto policy = smp::load_policy(checkpoint);
      const auto set = read_variants(eval_variants);
      const auto graphs = heldout_only ? set.heldout() : set.variants;
      std::vector<smp::EvalResult> res;
      if (policy.modular)
        res = smp::evaluate(*policy.modular, std::span<const smp::MorphologyGraph>(graphs), episodes,
                            eval_seed, policy.env);
      else
        res = smp::evaluate(*policy.monolithic, std::span<const smp::MorphologyGraph>(graphs),
                            episodes, eval_seed, policy.env);
      if (eval_out.empty()) {
        write_eval_csv(std::cout, res);
      } else {
        std::ofstream os(eval_out);
        write_eval_csv(os, res);
      }
    } else if (*enumerate) {
      const auto base = smp::graph_from_json(read_json(base_file));
      const smp::Feasibility f =
          min_limbs > 0 ? smp::min_limbs(min_limbs) : smp::Feasibility(smp::default_feasibility);
      const auto set = smp::enumerate_variants(base, f, heldout_fraction, split_seed);
      std::ofstream os(enum_out);
      os << smp::variant_set_to_json(set).dump(2) << '\n';
      std::cout << set.variants.size() << " variants (" << set.train_split.size() << " train, "
                << set.heldout_split.size() << " held out)\n";
    } else if (*rerootc) {
      const auto base = smp::graph_from_json(read_json(reroot_base));
      if (reroot_steps <= 0) {
        const auto g = smp::reroot(base, reroot_limb);
        const std::string text = smp::graph_to_json(g).dump(2);
        if (reroot_out.empty()) {
          std::cout << text << '\n';
        } else {
          std::ofstream os(reroot_out);
          os << text << '\n';
        }
      } else {
        smp::TrainConfig cfg;
        cfg.total_steps = reroot_steps;
        cfg.seed = reroot_seed;
        cfg.warmup_steps = std::min(cfg.warmup_steps, reroot_steps);
        if (reroot_hidden > 0) cfg.hidden = reroot_hidden;
        const auto s = smp::reroot_experiment(
            base, reroot_limb, cfg,
            reroot_out.empty() ? std::nullopt : std::optional<fs::path>(reroot_out));
        std::cout << "root,mean_return,std_return\n"
                  << base.limb(base.root()).name << ',' << s.torso_mean << ',' << s.torso_std << '\n'
                  << reroot_limb << ',' << s.limb_mean << ',' << s.limb_std << '\n';
      }
    } else if (*analyze) {
      const auto policy = smp::load_policy(an_ckpt);
      if (!policy.modular) throw smp::SchemeMismatch("message analysis needs a modular policy");
      const auto g = smp::graph_from_json(read_json(an_variant));
      const auto log =
          smp::record_messages(policy.modular->actor(), g, policy.env, an_episodes, an_seed);
      fs::create_directories(an_out);
      {
        std::ofstream os(fs::path(an_out) / "messages.csv");
        log.write_csv(os);
      }
      {
        std::ofstream os(fs::path(an_out) / "projection.csv");
        os << "# root message projection: first principal component (stands in for 1-D t-SNE)\n";
        os << "episode,t,root_message_pc1,root_height\n";
        os.precision(10);
        for (int e : log.episodes()) {
          const auto p = smp::root_message_projection(log, g, e);
          std::size_t k = 0;
          for (const auto& r : log.rows)
            if (r.episode == e)
              os << e << ',' << r.t << ',' << p[k++] << ',' << r.states[g.root()].position[1] << '\n';
        }
      }
      {
        std::ofstream os(fs::path(an_out) / "correlation.csv");
        smp::write_correlation_csv(os, smp::message_range_correlation(log, g));
      }
      std::cout << log.rows.size() << " steps analysed\n";
    }
  } catch (const smp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
