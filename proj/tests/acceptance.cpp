// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <sys/wait.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <iostream>
#include <random>
#include <sstream>

#include "protoxplain/protoxplain.hpp"
#include "test_support.hpp"

namespace px = protoxplain;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << name << "): " << o.detail << std::endl;
  failures += !o.pass;
}

void run(int id, const std::string& name, const std::function<Outcome()>& body) {
  try {
    report(id, name, body());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("exception: ") + e.what()});
  }
}

px::Grid bits_to_grid(unsigned bits) {
  px::Grid g(3, 3);
  for (int i = 0; i < 9; ++i) g.data()[i] = (bits >> i) & 1u;
  return g;
}

Outcome dice_oracle() {
  const auto t0 = Clock::now();
  std::size_t checked = 0;
  double worst = 0.0;
  for (unsigned g = 0; g < 512; ++g) {
    const auto heat = bits_to_grid(g);
    for (unsigned m = 0; m < 512; ++m) {
      const int total = std::popcount(g) + std::popcount(m);
      if (total == 0) continue;
      const double expected = 1.0 - 2.0 * std::popcount(g & m) / static_cast<double>(total);
      worst = std::max(worst, std::abs(px::dice_explanation_loss(heat, bits_to_grid(m), 0.0) - expected));
      ++checked;
    }
  }
  const double t = seconds_since(t0);
  std::ostringstream d;
  d << checked << " pairs, max |diff| " << worst << ", " << t << " s";
  return {worst == 0.0 && t < 5.0, d.str()};
}

Outcome proto_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0;
  double worst_sum = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
    const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 32)(rng);
    px::PrototypeSet protos{std::vector<px::Vector>(n, px::Vector(static_cast<Eigen::Index>(d)))};
    px::Vector q(static_cast<Eigen::Index>(d));
    for (auto& c : protos.prototypes) for (auto& v : c) v = normal(rng);
    for (auto& v : q) v = normal(rng);
    std::vector<double> naive(n);
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      double dist = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = q[static_cast<Eigen::Index>(i)] - protos.prototypes[k][static_cast<Eigen::Index>(i)];
        dist += diff * diff;
      }
      naive[k] = std::exp(-dist);
      z += naive[k];
    }
    const auto got = px::classify_query(q, protos);
    double sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      worst = std::max(worst, std::abs(got.probs[k] - naive[k] / z));
      sum += got.probs[k];
    }
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
  }
  const double t = seconds_since(t0);
  std::ostringstream d;
  d << "1000 instances, max |diff| " << worst << ", max |sum-1| " << worst_sum << ", " << t << " s";
  return {worst < 1e-9 && worst_sum < 1e-6 && t < 5.0, d.str()};
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  const auto ds = px::testing::random_dataset(3, 4, 2, 8, 11);
  double worst = 0.0;
  std::size_t params_checked = 0;
  for (const std::string layer : {"", "block1"}) {
    px::BackboneConfig bc;
    bc.input_channels = 2;
    bc.input_height = 8;
    bc.input_width = 8;
    bc.embedding_dim = 4;
    bc.blocks = 2;
    bc.cam_layer = layer;
    px::ReferenceCnn model(bc, 3);
    px::TrainConfig tc;
    tc.alpha = 0.1;
    tc.explanation.second_order = px::SecondOrder::full;
    const auto ep = px::sample_episode(ds, px::EpisodeSpec{3, 2, 2, 5}, 0);
    std::vector<double> grads(model.parameters().size(), 0.0);
    px::episode_losses(ep, model, tc, &grads);
    auto& params = model.parameters().values();
    const auto numeric = px::testing::central_differences(
        params, [&] { return px::episode_losses(ep, model, tc).l_total; }, 1e-6);
    for (std::size_t i = 0; i < params.size(); ++i) {
      worst = std::max(worst, px::testing::relative_error(grads[i], numeric[i]));
    }
    params_checked += params.size();
  }
  const double t = seconds_since(t0);
  std::ostringstream d;
  d << params_checked << " parameters over 2 Grad-CAM layers, max rel err " << worst << ", " << t << " s";
  return {worst < 1e-3 && t < 120.0, d.str()};
}

/// Shared state for the training-based criteria.
struct Desk {
  px::Dataset train;
  px::Dataset test;
  std::optional<px::TrainResult> baseline_seed1;
  px::EvalReport baseline_seed1_eval;
  double baseline_seed1_seconds = 0.0;
};

px::TrainConfig desk_config(double alpha, std::uint64_t seed, px::Objective objective) {
  px::TrainConfig c;
  c.alpha = alpha;
  c.seed = seed;
  c.objective = objective;
  return c;
}

Outcome alpha_zero_equivalence(Desk& desk) {
  const auto t0 = Clock::now();
  desk.baseline_seed1 = px::train(desk.train, desk_config(0.0, 1, px::Objective::baseline));
  desk.baseline_seed1_eval = px::evaluate(desk.baseline_seed1->model, desk.test, px::EvalConfig{});
  desk.baseline_seed1_seconds = seconds_since(t0);
  const auto guided = px::train(desk.train, desk_config(0.0, 1, px::Objective::guided));
  const auto& a = guided.report.records;
  const auto& b = desk.baseline_seed1->report.records;
  double worst = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    for (auto [x, y] : {std::pair{a[i].l_proto, b[i].l_proto}, {a[i].l_exp, b[i].l_exp},
                        {a[i].l_total, b[i].l_total}, {a[i].accuracy, b[i].accuracy}}) {
      worst = std::max(worst, std::abs(x - y));
    }
  }
  const auto& pa = guided.model.parameters().values();
  const auto& pb = desk.baseline_seed1->model.parameters().values();
  for (std::size_t i = 0; i < pa.size(); ++i) worst = std::max(worst, std::abs(pa[i] - pb[i]));
  const double t = seconds_since(t0);
  std::ostringstream d;
  d << a.size() << " records, max |diff| " << worst << " (records and weights), " << t << " s";
  return {worst <= 1e-12 && t < 120.0, d.str()};
}

Outcome desk_reproduction(const Desk& desk) {
  const auto t0 = Clock::now();
  double base_acc = 0.0, base_align = 0.0, guided_acc = 0.0, guided_align = 0.0;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto base = seed == 1 ? desk.baseline_seed1_eval
                                : px::evaluate(px::train(desk.train, desk_config(0.0, seed, px::Objective::baseline)).model,
                                               desk.test, px::EvalConfig{});
    const auto guided = px::evaluate(px::train(desk.train, desk_config(0.1, seed, px::Objective::guided)).model,
                                     desk.test, px::EvalConfig{});
    base_acc += base.overall_accuracy / 5.0;
    base_align += base.mean_alignment_dice / 5.0;
    guided_acc += guided.overall_accuracy / 5.0;
    guided_align += guided.mean_alignment_dice / 5.0;
    per_seed << "\n      seed " << seed << ": baseline acc " << base.overall_accuracy << " align "
             << base.mean_alignment_dice << " | guided acc " << guided.overall_accuracy << " align "
             << guided.mean_alignment_dice;
  }
  const double t = seconds_since(t0) + desk.baseline_seed1_seconds;
  std::ostringstream d;
  d << "mean alignment " << guided_align << " vs " << base_align << " (gap " << guided_align - base_align
    << "), mean accuracy " << guided_acc << " vs " << base_acc << ", " << t << " s" << per_seed.str();
  return {guided_align - base_align >= 0.15 && guided_acc >= base_acc && t < 600.0, d.str()};
}

Outcome sweep_shape(const Desk& desk, const fs::path& work) {
  const auto t0 = Clock::now();
  const auto sweep = px::alpha_sweep(desk.train, desk.test, desk_config(0.1, 1, px::Objective::guided),
                                     px::default_alpha_grid(), px::EvalConfig{});
  const auto csv = work / "sweep.csv";
  const auto png = work / "sweep.png";
  px::write_sweep_csv(csv.string(), sweep);
  px::write_png(png.string(), px::sweep_plot(sweep));
  std::ifstream in(csv);
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  const bool zero_row = sweep.rows.front().alpha == 0.0 &&
                        sweep.rows.front().accuracy == desk.baseline_seed1_eval.overall_accuracy &&
                        sweep.rows.front().alignment == desk.baseline_seed1_eval.mean_alignment_dice;
  const double t = seconds_since(t0);
  std::ostringstream d;
  d << sweep.rows.size() << " rows, csv data lines " << lines - 1 << ", plot " << fs::file_size(png)
    << " bytes, alpha=0 row matches baseline: " << (zero_row ? "yes" : "no") << ", best alpha " << sweep.best_alpha
    << ", " << t << " s";
  for (const auto& r : sweep.rows) d << "\n      alpha " << r.alpha << ": acc " << r.accuracy << " align " << r.alignment;
  return {sweep.rows.size() == 6 && lines == 7 && fs::file_size(png) > 0 && zero_row && t < 1800.0, d.str()};
}

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  const std::string cli = "'" + std::string(PROTOXPLAIN_CLI) + "'";
  auto q = [&](const fs::path& p) { return "'" + (work / p).string() + "'"; };
  const std::string quiet = " > /dev/null 2>&1";
  if (shell(cli + " gen-synth --out " + q("data") + quiet) != 0) return {false, "gen-synth failed"};
  for (const char* run : {"r1", "r2"}) {
    if (shell(cli + " train --data " + q("data/train") + " --out " + q(run) + " --alpha 0.1 --seed 1" + quiet) != 0) {
      return {false, std::string("train failed for ") + run};
    }
    if (shell(cli + " eval --checkpoint " + q(fs::path(run) / "checkpoint.pxw") + " --data " + q("data/test") +
              " --out " + q(fs::path(run) / "eval") + quiet) != 0) {
      return {false, std::string("eval failed for ") + run};
    }
  }
  const auto r1 = px::sha256_file(work / "r1/report.csv");
  const auto r2 = px::sha256_file(work / "r2/report.csv");
  const auto e1 = px::sha256_file(work / "r1/eval/eval.csv");
  const auto e2 = px::sha256_file(work / "r2/eval/eval.csv");
  std::ostringstream d;
  d << "report.csv " << r1.substr(0, 16) << (r1 == r2 ? " == " : " != ") << r2.substr(0, 16) << ", eval.csv "
    << e1.substr(0, 16) << (e1 == e2 ? " == " : " != ") << e2.substr(0, 16) << ", " << seconds_since(t0) << " s";
  return {r1 == r2 && e1 == e2, d.str()};
}

Outcome heatmap_invariants() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t violations = 0;
  std::size_t zero_maps = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
    const std::size_t h = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t w = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    const std::size_t scale = std::uniform_int_distribution<std::size_t>(1, 8)(rng);
    px::Tensor3 act(c, h, w), grad(c, h, w);
    for (auto& v : act.data) v = trial % 2 == 0 ? std::max(0.0, normal(rng)) : normal(rng);
    for (auto& v : grad.data) v = normal(rng);
    const px::Grid raw = px::gradcam_raw(act, grad);
    const auto heat = px::normalize_upsample(raw, h * scale, w * scale);
    const double lo = heat.values.minCoeff();
    const double hi = heat.values.maxCoeff();
    const bool nonzero = (raw > 0.0).any();
    zero_maps += !nonzero;
    if (lo < 0.0 || hi > 1.0 || (nonzero && hi != 1.0) || (!nonzero && hi != 0.0)) ++violations;
  }
  std::ostringstream d;
  d << "1000 blocks (" << zero_maps << " with an all-zero rectified map), " << violations << " violations, "
    << seconds_since(t0) << " s";
  return {violations == 0, d.str()};
}

}  // namespace

int main() {
  const auto work = fs::temp_directory_path() / "protoxplain_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  run(1, "Dice oracle", dice_oracle);
  run(2, "prototypical oracle", proto_oracle);
  run(3, "gradient check", gradient_check);

  Desk desk;
  bool have_data = false;
  try {
    px::generate(px::SynthConfig{}, work / "synth");
    desk.train = px::load_dataset(work / "synth/train", 3);
    desk.test = px::load_dataset(work / "synth/test", 3);
    have_data = true;
  } catch (const std::exception& e) {
    std::cout << "synthetic data generation failed: " << e.what() << std::endl;
  }
  bool have_baseline = false;
  run(4, "alpha=0 equivalence", [&] {
    if (!have_data) return Outcome{false, "no synthetic data"};
    auto o = alpha_zero_equivalence(desk);
    have_baseline = true;
    return o;
  });
  run(5, "desk-scale reproduction", [&] {
    return have_baseline ? desk_reproduction(desk) : Outcome{false, "no baseline run"};
  });
  run(6, "alpha sweep", [&] { return have_baseline ? sweep_shape(desk, work) : Outcome{false, "no baseline run"}; });
  run(7, "CLI determinism", [&] { return cli_determinism(work / "cli"); });
  run(8, "heatmap invariants", heatmap_invariants);

  fs::remove_all(work);
  std::cout << (failures == 0 ? "all 8 criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
