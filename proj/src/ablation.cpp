#include "hgbev/harness.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace hgbev {

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0;
  int n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  return n ? s / n : NAN;
}

std::string fixed(double v, int digits = 4) {
  if (!std::isfinite(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

double ArmResult::mean_map() const { return mean_of(map); }
double ArmResult::mean_center_error() const { return mean_of(center_error); }
double ArmResult::mean_height_accuracy() const { return mean_of(height_accuracy); }

std::vector<AblationArm> main_arms() {
  return {{"baseline", false, false, 0, {}, {}, {}},
          {"+VHA", true, false, 0, {}, {}, {}},
          {"+DHCA", false, true, 0, {}, {}, {}},
          {"full", true, true, 0, {}, {}, {}}};
}

std::vector<AblationArm> sweep_arms(const std::string& sweep) {
  std::vector<AblationArm> arms;
  if (sweep == "bins") {
    for (int d : {4, 6, 8, 10}) arms.push_back({"D=" + std::to_string(d), true, true, 0, d, {}, {}});
  } else if (sweep == "neighbors") {
    for (int m : {2, 4, 8}) arms.push_back({"M=" + std::to_string(m), true, true, 0, {}, m, {}});
  } else if (sweep == "nref") {
    for (int n : {4, 8, 16}) arms.push_back({"uniform N_ref=" + std::to_string(n), false, false, n, {}, {}, {}});
  } else if (sweep == "controls") {
    arms.push_back({"baseline uniform N_ref=16", false, false, 16, {}, {}, {}});
    arms.push_back({"full", true, true, 0, {}, {}, 0.0});
  } else {
    throw std::invalid_argument("unknown sweep '" + sweep + "' (expected bins, neighbors, nref or controls)");
  }
  return arms;
}

RunConfig apply_arm(const RunConfig& base, const AblationArm& arm, std::uint64_t seed) {
  RunConfig cfg = base;
  cfg.seed = seed;
  cfg.encoder.vha = arm.vha;
  cfg.encoder.dhca = arm.dhca;
  cfg.encoder.uniform_nref = arm.vha ? 0 : arm.uniform_nref;
  if (arm.d_bins) cfg.encoder.grid.d_bins = *arm.d_bins;
  if (arm.neighbors) cfg.encoder.m_neighbors = *arm.neighbors;
  if (arm.height_weight) cfg.loss.hgt = *arm.height_weight;
  cfg.validate();
  return cfg;
}

std::vector<ArmResult> run_ablation(const RunConfig& base, const Dataset& data, const std::vector<AblationArm>& arms,
                                    int n_seeds, const std::function<void(const std::string&)>& log) {
  if (n_seeds < 1) throw std::invalid_argument("ablation needs at least one seed");
  std::vector<ArmResult> out;
  for (const AblationArm& arm : arms) {
    ArmResult r;
    r.arm = arm;
    for (int k = 0; k < n_seeds; ++k) {
      const std::uint64_t seed = base.seed + static_cast<std::uint64_t>(k);
      const RunConfig cfg = apply_arm(base, arm, seed);
      TrainState state;
      state.params = init_model(cfg);
      train(state, cfg, data);
      const EvalReport rep = evaluate(state.params, cfg, data);
      r.seeds.push_back(seed);
      r.map.push_back(rep.map.map);
      r.center_error.push_back(rep.mean_center_error);
      r.height_accuracy.push_back(rep.height_accuracy);
      if (log)
        log(arm.name + " seed " + std::to_string(seed) + ": mAP " + fixed(rep.map.map) + ", center error " +
            fixed(rep.mean_center_error, 3) + ", height accuracy " + fixed(rep.height_accuracy, 3));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_ablation_table(const std::vector<ArmResult>& rows) {
  std::ostringstream os;
  os << "| Arm | VHA | DHCA | N_ref | D | M | mAP | Center err (m) | Height acc | Seeds | mAP per seed |\n";
  os << "|---|:-:|:-:|--:|--:|--:|--:|--:|--:|---|---|\n";
  for (const ArmResult& r : rows) {
    const AblationArm& a = r.arm;
    std::string seeds, maps;
    for (size_t i = 0; i < r.seeds.size(); ++i) {
      seeds += (i ? "," : "") + std::to_string(r.seeds[i]);
      maps += (i ? "," : "") + fixed(r.map[i]);
    }
    std::string name = a.name;
    if (a.height_weight) name += " (lambda3=" + fixed(*a.height_weight, 2) + ")";
    os << "| " << name << " | " << (a.vha ? "✓" : "") << " | " << (a.dhca ? "✓" : "") << " | "
       << (a.vha || a.uniform_nref == 0 ? "-" : std::to_string(a.uniform_nref)) << " | "
       << (a.d_bins ? std::to_string(*a.d_bins) : "-") << " | " << (a.neighbors ? std::to_string(*a.neighbors) : "-")
       << " | " << fixed(r.mean_map()) << " | " << fixed(r.mean_center_error(), 3) << " | "
       << fixed(r.mean_height_accuracy(), 3) << " | " << seeds << " | " << maps << " |\n";
  }
  return os.str();
}

}  // namespace hgbev
