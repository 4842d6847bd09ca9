#include "eve/sweep.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace eve {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, sep)) out.push_back(part);
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<OverrideSet> parse_grid(const std::string& grid) {
  struct Axis {
    std::string key;
    std::vector<std::string> values;
  };
  std::vector<Axis> axes;
  for (const std::string& part : split(grid, ';')) {
    if (trim(part).empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("sweep: axis '" + part + "' lacks '='");
    }
    Axis axis;
    axis.key = trim(part.substr(0, eq));
    if (axis.key.empty()) throw std::invalid_argument("sweep: axis with empty key");
    for (const std::string& v : split(part.substr(eq + 1), '|')) {
      axis.values.push_back(trim(v));
    }
    if (axis.values.empty() || (axis.values.size() == 1 && axis.values[0].empty())) {
      throw std::invalid_argument("sweep: axis '" + axis.key + "' has no values");
    }
    for (const Axis& seen : axes) {
      if (seen.key == axis.key) {
        throw std::invalid_argument("sweep: duplicate axis '" + axis.key + "'");
      }
    }
    axes.push_back(std::move(axis));
  }
  if (axes.empty()) throw std::invalid_argument("sweep: empty grid");

  std::vector<OverrideSet> combos = {{}};
  for (const Axis& axis : axes) {
    std::vector<OverrideSet> next;
    next.reserve(combos.size() * axis.values.size());
    for (const OverrideSet& base : combos) {
      for (const std::string& v : axis.values) {
        OverrideSet c = base;
        c.emplace_back(axis.key, v);
        next.push_back(std::move(c));
      }
    }
    combos = std::move(next);
  }
  return combos;
}

SweepReport run_sweep(const ModelConfig& base, const SweepOptions& opt) {
  const std::vector<OverrideSet> combos = parse_grid(opt.grid);

  // Fail on an invalid combination before any training time is spent.
  for (const OverrideSet& combo : combos) {
    ModelConfig cfg = base;
    for (const auto& [k, v] : combo) apply_override(cfg, k, v);
    validate(cfg);
  }

  std::filesystem::create_directories(opt.out_dir);
  SweepReport rep;
  nlohmann::json summary = nlohmann::json::array();

  for (std::size_t i = 0; i < combos.size(); ++i) {
    ModelConfig cfg = base;
    for (const auto& [k, v] : combos[i]) apply_override(cfg, k, v);

    SweepRun run;
    run.index = static_cast<int>(i);
    run.overrides = combos[i];
    char leaf[16];
    std::snprintf(leaf, sizeof(leaf), "run_%03zu", i);
    run.dir = opt.out_dir + "/" + leaf;

    {
      std::filesystem::create_directories(run.dir);
      std::ofstream cfg_out(run.dir + "/config.txt", std::ios::trunc);
      cfg_out << config_to_text(cfg);
    }

    TrainOptions topt;
    topt.out_dir = run.dir;
    topt.quiet = opt.quiet;
    run.summary = train(cfg, topt);

    nlohmann::json j;
    j["run"] = run.index;
    j["dir"] = run.dir;
    nlohmann::json ov = nlohmann::json::object();
    for (const auto& [k, v] : combos[i]) ov[k] = v;
    j["overrides"] = ov;
    j["final_step"] = run.summary.final_step;
    j["final_total"] = run.summary.final_total;
    j["final_mlm"] = run.summary.final_mlm;
    j["final_mim"] = run.summary.final_mim;
    j["mean_tokens_per_sec"] = run.summary.mean_tokens_per_sec;
    summary.push_back(std::move(j));

    rep.runs.push_back(std::move(run));
  }

  std::ofstream sum(opt.out_dir + "/sweep.json", std::ios::trunc);
  sum << summary.dump(2) << "\n";
  return rep;
}

}  // namespace eve
