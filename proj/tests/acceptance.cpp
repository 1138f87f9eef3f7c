// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.
// AMIMV_ACCEPTANCE_ONLY=1,3,5 restricts the run to the listed criteria.

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "amimv/dataset.hpp"
#include "amimv/errors.hpp"
#include "amimv/eval.hpp"
#include "amimv/fsutil.hpp"
#include "amimv/imbalance.hpp"
#include "amimv/loss.hpp"
#include "amimv/model.hpp"
#include "amimv/optim.hpp"
#include "amimv/report.hpp"
#include "amimv/trainer.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "test_support.hpp"

using namespace amimv;
using amimv::testing::gradcheck;
using amimv::testing::random_away_from_zero;
using amimv::testing::random_tensor;
using amimv::testing::weighted_sum;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

// Records every failed expectation and keeps a short summary.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    ++total_;
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& text) { notes_ += (notes_.empty() ? "" : "; ") + text; }
  Verdict verdict() const {
    Verdict v;
    v.pass = failures_.empty() && total_ > 0;
    std::ostringstream os;
    os << total_ - failures_.size() << '/' << total_ << " checks";
    if (!notes_.empty()) os << "; " << notes_;
    for (std::size_t i = 0; i < failures_.size() && i < 5; ++i) os << "; failed: " << failures_[i];
    if (failures_.size() > 5) os << "; ... " << failures_.size() - 5 << " more";
    v.detail = os.str();
    return v;
  }

 private:
  std::size_t total_ = 0;
  std::vector<std::string> failures_;
  std::string notes_;
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c, d);
  return buf;
}

bool same_values(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  const auto x = a.values(), y = b.values();
  return std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. imbalance metrics against published rows

bool near(double got, double want) { return std::abs(got - want) <= 0.01 + 1e-12; }

void check_row(Checks& c, const std::string& name, const ImbalanceReport& r, const nlohmann::json& e) {
  for (const auto& [key, got] : {std::pair{"ir", r.ir}, {"cv", r.cv}, {"ne", r.ne}, {"gi", r.gi}, {"rcr", r.rcr}}) {
    const double want = e[key].get<double>();
    c.expect(near(got, want), name + " " + key + " " + fmt("%.4f vs %.2f", got, want));
  }
}

Verdict criterion_imbalance() {
  Checks c;
  // DermaMNIST train split: min 80, max 4693, total 7007 over 7 classes.
  {
    const auto t0 = std::chrono::steady_clock::now();
    LabelHistogram h;
    h.counts = {228, 359, 769, 80, 779, 4693, 99};
    const auto r = imbalance_metrics(h);
    c.expect(r.total == 7007 && r.min_count == 80 && r.max_count == 4693, "dermamnist histogram shape");
    check_row(c, "dermamnist", r, {{"ir", 58.66}, {"cv", 1.65}, {"ne", 0.58}, {"gi", 0.64}, {"rcr", 1.14}});
    c.expect(seconds_since(t0) < 1.0, "dermamnist runtime");
  }
  std::ifstream in(amimv::testing::fixture("medmnist_train_histograms.json"));
  const auto doc = nlohmann::json::parse(in);
  std::map<std::string, nlohmann::json> expected;
  for (const auto& entry : doc["datasets"]) {
    const std::string name = entry["name"];
    expected[name] = entry["expected"];
    const auto t0 = std::chrono::steady_clock::now();
    LabelHistogram h;
    h.counts = entry["train_counts"].get<std::vector<std::size_t>>();
    check_row(c, name, imbalance_metrics(h), entry["expected"]);
    c.expect(seconds_since(t0) < 1.0, name + " runtime");
  }
  c.note(std::to_string(expected.size()) + " published histograms");

  // Real archives, when supplied, go through the full loader.
  std::size_t files = 0;
  if (const char* dir = std::getenv("AMIMV_MEDMNIST_DIR"); dir && fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() != ".npz") continue;
      std::string stem = e.path().stem().string();
      std::transform(stem.begin(), stem.end(), stem.begin(), [](unsigned char ch) { return std::tolower(ch); });
      const auto it = std::find_if(expected.begin(), expected.end(),
                                   [&](const auto& kv) { return stem == kv.first || stem.starts_with(kv.first + "_"); });
      if (it == expected.end()) continue;
      const auto t0 = std::chrono::steady_clock::now();
      const ImageDataset ds = load_npz(e.path());
      check_row(c, stem, imbalance_metrics(label_histogram(ds, Split::train)), it->second);
      c.expect(seconds_since(t0) < 1.0, stem + " runtime " + fmt("%.2fs", seconds_since(t0)));
      ++files;
    }
  }
  c.note(std::to_string(files) + " archive files");
  return c.verdict();
}

// ---------------------------------------------------------------------------
// 2. finite-difference gradients

Verdict criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr int kTrials = 20;
  std::mt19937_64 rng(2024);
  std::map<std::string, double> worst;
  std::map<std::string, int> trials;
  auto record = [&](const std::string& op, const amimv::testing::GradcheckResult& r) {
    worst[op] = std::max(worst[op], r.max_rel_error);
    ++trials[op];
  };
  std::uniform_int_distribution<std::size_t> dim(1, 4), sz(3, 6), ch(1, 3), kk(1, 3), st(1, 2), pd(0, 1), rows(2, 4);
  const std::array<FusionKind, 3> kinds{FusionKind::mean_norm, FusionKind::hadamard_norm, FusionKind::concat};
  for (int t = 0; t < kTrials; ++t) {
    const Shape s{2, 3};
    const Tensor a = random_tensor(rng, s), b = random_tensor(rng, s);
    record("add", gradcheck([](const auto& in) { return weighted_sum(ops::add(in[0], in[1])); }, {a, b}));
    record("sub", gradcheck([](const auto& in) { return weighted_sum(ops::sub(in[0], in[1])); }, {a, b}));
    record("mul", gradcheck([](const auto& in) { return weighted_sum(ops::mul(in[0], in[1])); }, {a, b}));
    record("scale", gradcheck([](const auto& in) { return weighted_sum(ops::scale(in[0], -1.7)); }, {a}));
    record("add_scalar", gradcheck([](const auto& in) { return weighted_sum(ops::add_scalar(in[0], 0.3)); }, {a}));
    record("relu", gradcheck([](const auto& in) { return weighted_sum(ops::relu(in[0])); }, {random_away_from_zero(rng, s)}));
    record("exp", gradcheck([](const auto& in) { return weighted_sum(ops::exp(in[0])); }, {a}));
    record("log", gradcheck([](const auto& in) { return weighted_sum(ops::log(in[0])); }, {random_tensor(rng, s, 0.2, 2.0)}));
    record("sum", gradcheck([](const auto& in) { return ops::sum(ops::mul(in[0], in[0])); }, {a}));
    record("mean", gradcheck([](const auto& in) { return ops::mean(ops::mul(in[0], in[0])); }, {a}));
    record("sum_last", gradcheck([](const auto& in) { return weighted_sum(ops::sum_last(in[0])); }, {a}));
    record("add_bias", gradcheck([](const auto& in) { return weighted_sum(ops::add_bias(in[0], in[1])); },
                                 {random_tensor(rng, {2, 3, 2, 2}), random_tensor(rng, {3})}));

    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    record("matmul", gradcheck([](const auto& in) { return weighted_sum(ops::matmul(in[0], in[1])); },
                               {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}));
    record("transpose", gradcheck([](const auto& in) { return weighted_sum(ops::transpose(in[0])); }, {random_tensor(rng, {m, k})}));
    record("concat", gradcheck([](const auto& in) { return weighted_sum(ops::concat({in[0], in[1]}, 0)); },
                               {random_tensor(rng, {m, k}), random_tensor(rng, {n, k})}));
    record("concat", gradcheck([](const auto& in) { return weighted_sum(ops::concat({in[0], in[1]}, 1)); },
                               {random_tensor(rng, {m, k}), random_tensor(rng, {m, n})}));
    const std::vector<std::size_t> idx{m - 1, 0, m - 1};
    record("gather_rows", gradcheck([&](const auto& in) { return weighted_sum(ops::gather_rows(in[0], idx)); },
                                    {random_tensor(rng, {m, k})}));
    record("slice_rows", gradcheck([&](const auto& in) { return weighted_sum(ops::slice_rows(in[0], m - 1, 1)); },
                                   {random_tensor(rng, {m, k})}));
    record("reshape", gradcheck([&](const auto& in) { return weighted_sum(ops::reshape(in[0], {k, m})); },
                                {random_tensor(rng, {m, k})}));

    const std::size_t c = ch(rng), h = sz(rng), w = sz(rng), kernel = kk(rng), stride = st(rng), pad = pd(rng);
    record("conv2d", gradcheck([=](const auto& in) { return weighted_sum(ops::conv2d(in[0], in[1], stride, pad)); },
                               {random_tensor(rng, {2, c, h, w}), random_tensor(rng, {2, c, kernel, kernel})}));
    record("avg_pool2d", gradcheck([](const auto& in) { return weighted_sum(ops::avg_pool2d(in[0], 2)); },
                                   {random_tensor(rng, {2, c, h, w})}));
    record("group_norm", gradcheck([](const auto& in) { return weighted_sum(ops::group_norm(in[0], in[1], in[2], 2)); },
                                   {random_tensor(rng, {2, 4, h, w}), random_tensor(rng, {4}, 0.5, 1.5), random_tensor(rng, {4})}));
    record("l2_normalize", gradcheck([](const auto& in) { return weighted_sum(ops::l2_normalize(in[0])); },
                                     {random_away_from_zero(rng, {3, 4})}));
    record("logsumexp", gradcheck([](const auto& in) { return weighted_sum(ops::logsumexp(in[0])); },
                                  {random_tensor(rng, {3, 5}, -3, 3)}));

    const FusionKind kind = kinds[static_cast<std::size_t>(t) % kinds.size()];
    const std::size_t r = rows(rng);
    record("fuse", gradcheck([kind](const auto& in) { return weighted_sum(fuse(in[0], in[1], kind)); },
                             {random_away_from_zero(rng, {r, 3}), random_away_from_zero(rng, {r, 3})}));
    record("nt_xent", gradcheck([](const auto& in) { return nt_xent(in[0], in[1], 0.5); },
                                {random_away_from_zero(rng, {r, 3}), random_away_from_zero(rng, {r, 3})}));
    const Tensor z1a = random_tensor(rng, {r, 3}).detach(), z2n = random_tensor(rng, {r, 3}).detach();
    const LossConfig lc{0.5, kind};
    record("amimv_loss", gradcheck([&](const auto& in) { return amimv_loss(in[0], in[1], z1a, z2n, lc); },
                                   {random_away_from_zero(rng, {r, 3}), random_away_from_zero(rng, {r, 3})}));
  }
  Checks c;
  double overall = 0.0;
  for (const auto& [op, err] : worst) {
    c.expect(err <= 1e-4, op + fmt(" max rel err %.3g", err));
    c.expect(trials[op] >= kTrials, op + " instance count");
    overall = std::max(overall, err);
  }
  const double elapsed = seconds_since(t0);
  c.expect(elapsed < 60.0, fmt("runtime %.1fs", elapsed));
  c.note(std::to_string(worst.size()) + " operations" + fmt(", worst rel err %.2e, %.1fs", overall, elapsed));
  return c.verdict();
}

// ---------------------------------------------------------------------------
// 3. loss closed forms

Tensor rows_of(const std::vector<std::vector<double>>& r) {
  std::vector<double> v;
  for (const auto& row : r) v.insert(v.end(), row.begin(), row.end());
  return Tensor::from_buffer(std::move(v), {r.size(), r.front().size()});
}

Verdict criterion_loss_forms() {
  Checks c;
  std::mt19937_64 rng(3);
  const Tensor one_l = random_tensor(rng, {1, 4}), one_r = random_tensor(rng, {1, 4});
  c.expect(nt_xent(one_l, one_r, 0.2).item() == 0.0, "N=1 gives 0");
  for (std::size_t n : {2, 4, 8}) {
    std::vector<std::vector<double>> same(n, {0.6, 0.0, 0.8});
    const double got = nt_xent(rows_of(same), rows_of(same), 0.2).item();
    const double want = std::log(2.0 * static_cast<double>(n) - 1.0);
    c.expect(std::abs(got - want) <= 1e-6, "identical N=" + std::to_string(n) + fmt(" %.9f vs %.9f", got, want));
  }
  const Tensor e = rows_of({{1.0, 0.0}, {0.0, 1.0}});
  const double orth = nt_xent(e, e, 1.0).item();
  c.expect(std::abs(orth - 0.5514) <= 1e-4, fmt("orthogonal tau=1 %.6f", orth));
  c.expect(std::abs(orth - std::log(1.0 + 2.0 * std::exp(-1.0))) <= 1e-12, "orthogonal closed form");

  std::size_t exact = 0, trials = 0;
  for (auto kind : {FusionKind::mean_norm, FusionKind::hadamard_norm, FusionKind::concat}) {
    for (int t = 0; t < 20; ++t) {
      const std::size_t n = 2 + rng() % 7, d = 2 + rng() % 6;
      const Tensor z1n = random_tensor(rng, {n, d}), z2a = random_tensor(rng, {n, d});
      const Tensor z1a = random_tensor(rng, {n, d}), z2n = random_tensor(rng, {n, d});
      const LossConfig lc{0.05 + 0.05 * t, kind};
      const double composed = nt_xent(fuse(z1n, z2a, kind), fuse(z1a, z2n, kind), lc.tau).item();
      const double direct = amimv_loss(z1n, z2a, z1a.detach(), z2n.detach(), lc).item();
      exact += std::memcmp(&composed, &direct, sizeof composed) == 0;
      ++trials;
    }
  }
  c.expect(exact == trials, std::to_string(exact) + "/" + std::to_string(trials) + " bitwise compositions");
  c.note(fmt("orthogonal case %.6f", orth));
  return c.verdict();
}

// ---------------------------------------------------------------------------
// 4. stop-gradient and EMA

Verdict criterion_stop_gradient() {
  Checks c;
  RunConfig cfg;
  cfg.dataset = "synthetic:C=2,counts=46:46,size=16";
  cfg.epochs = 1;
  cfg.batch_size = 64;
  cfg.augment.crop_output = 16;
  cfg.output = "";
  const auto run = pretrain(cfg);
  c.expect(run.steps == 1, "one training step");
  std::size_t with_grad = 0;
  for (const auto& p : run.pair.k) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.grad().values())
      if (g != 0.0) ++with_grad;
  }
  c.expect(with_grad == 0, "key gradients absent or zero");
  bool q_grad = false;
  for (const auto& p : run.pair.q)
    if (p.value.has_grad())
      for (double g : p.value.grad().values()) q_grad = q_grad || g != 0.0;
  c.expect(q_grad, "query gradients present");

  EncoderConfig enc;
  enc.projector_hidden = 32;
  enc.projector_output = 16;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> noise(0.0, 0.1);
  for (double m : {0.99, 0.9, 0.5, 0.0, 1.0}) {
    EncoderPair pair = init_pair(enc, 11, m);
    for (auto& p : pair.q)
      for (auto& v : p.value.mutable_data<float>()) v += static_cast<float>(noise(rng));
    const EncoderPair before = clone_pair(pair);
    ema_update(pair);
    double worst = 0.0;
    bool exact = true;
    for (std::size_t i = 0; i < pair.k.size(); ++i) {
      const auto k0 = before.k[i].value.values(), q = before.q[i].value.values(), k1 = pair.k[i].value.values();
      for (std::size_t j = 0; j < k1.size(); ++j) {
        worst = std::max(worst, std::abs(k1[j] - (m * k0[j] + (1.0 - m) * q[j])));
        if (m == 1.0) exact = exact && k1[j] == k0[j];
        if (m == 0.0) exact = exact && k1[j] == q[j];
      }
      c.expect(same_values(before.q[i].value, pair.q[i].value), "q untouched");
    }
    c.expect(worst <= 1e-7, fmt("m=%.2f max deviation %.3g", m, worst));
    if (m == 1.0 || m == 0.0) c.expect(exact, fmt("m=%.0f exact", m));
  }
  return c.verdict();
}

// ---------------------------------------------------------------------------
// 5. schedule

Verdict criterion_schedule() {
  Checks c;
  Schedule s;
  s.base_lr = scaled_base_lr(128);
  s.total_steps = 1000;
  const std::size_t warm = s.warmup_steps();
  c.expect(lr_at(0, s) == 1e-4, "lr(0) == 1e-4");
  c.expect(std::abs(lr_at(warm, s) - 0.375) <= 1e-12, fmt("warmup end %.15f", lr_at(warm, s)));
  c.expect(std::abs(s.base_lr - 0.375) <= 1e-12, "base lr 0.75*128/256");
  const std::size_t mid = warm + (s.total_steps - warm) / 2;
  c.expect(std::abs(lr_at(mid, s) - s.base_lr / 2) <= 1e-12, fmt("midpoint %.15f", lr_at(mid, s)));
  c.expect(lr_at(s.total_steps, s) == 0.0, "final step 0");
  bool threw = false;
  try {
    (void)lr_at(s.total_steps + 1, s);
  } catch (const ContractError&) {
    threw = true;
  }
  c.expect(threw, "out-of-range step rejected");
  return c.verdict();
}

// ---------------------------------------------------------------------------
// 6. determinism

Verdict criterion_determinism() {
  Checks c;
  amimv::testing::TempDir dir;
  RunConfig cfg;
  cfg.dataset = "synthetic:C=4,counts=1000:100:100:100,size=28";
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.augment.crop_output = 28;
  cfg.seed = 7;
  cfg.output = (dir / "a").string();
  pretrain(cfg);
  cfg.output = (dir / "b").string();
  pretrain(cfg);
  using amimv::testing::read_bytes;
  c.expect(read_bytes(dir / "a/log.csv") == read_bytes(dir / "b/log.csv"), "log.csv identical");
  c.expect(read_bytes(dir / "a/checkpoint.bin") == read_bytes(dir / "b/checkpoint.bin"), "checkpoint.bin identical");
  c.expect(read_bytes(dir / "a/manifest.json") == read_bytes(dir / "b/manifest.json"), "manifest.json identical");
  c.expect(!read_bytes(dir / "a/checkpoint.bin").empty(), "checkpoint written");
  return c.verdict();
}

// ---------------------------------------------------------------------------
// 7. desk-scale imbalance experiment

struct ArmResult {
  PretrainResult run;
  EvalReport trained;
};

double minority_mean(const EvalReport& r) {
  double s = 0.0;
  for (std::size_t c = 1; c < r.per_class_accuracy.size(); ++c) s += r.per_class_accuracy[c];
  return s / static_cast<double>(r.per_class_accuracy.size() - 1);
}

EvalReport probe(const EncoderPair& pair, const ImageDataset& ds, std::size_t view) {
  const auto train = extract_features(pair, ds, Split::train, view);
  const auto test = extract_features(pair, ds, Split::test, view);
  const auto lp = linear_probe(train.features, train.labels, ds.num_classes, ProbeConfig{});
  return classification_metrics(lp.scores(test.features), test.labels);
}

Verdict criterion_experiment() {
  const auto t0 = std::chrono::steady_clock::now();
  // train split 700/70/70/70 after the 70/10/20 rule
  const std::string spec = "synthetic:C=4,counts=1000:100:100:100,size=28";
  const ImageDataset ds = open_dataset(spec);
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  Checks c;
  c.expect(label_histogram(ds, Split::train).counts == std::vector<std::size_t>{700, 70, 70, 70}, "train counts");

  auto config_for = [&](std::uint64_t seed, TrainMode mode) {
    RunConfig cfg;
    cfg.dataset = spec;
    cfg.epochs = 50;
    cfg.batch_size = 64;
    cfg.augment.crop_output = 28;
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.output = "";
    return cfg;
  };

  std::vector<ArmResult> amimv(seeds.size()), baseline(seeds.size());
  std::vector<EvalReport> random(seeds.size());
  std::vector<std::string> errors;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  auto guarded = [&](std::function<void()> fn) {
    return [fn, &errors, &error_mutex] {
      try {
        fn();
      } catch (const std::exception& e) {
        std::lock_guard lock(error_mutex);
        errors.emplace_back(e.what());
      }
    };
  };
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    workers.emplace_back(guarded([&, i] {
      amimv[i].run = pretrain(config_for(seeds[i], TrainMode::amimv), ds);
      amimv[i].trained = probe(amimv[i].run.pair, ds, 28);
    }));
    workers.emplace_back(guarded([&, i] {
      baseline[i].run = pretrain(config_for(seeds[i], TrainMode::simclr_baseline), ds);
      baseline[i].trained = probe(baseline[i].run.pair, ds, 28);
      EncoderConfig enc;
      enc.input_channels = ds.channels;
      random[i] = probe(init_pair(enc, seeds[i]), ds, 28);
    }));
  }
  for (auto& w : workers) w.join();
  for (const auto& e : errors) c.expect(false, "run failed: " + e);
  if (!errors.empty()) return c.verdict();

  std::size_t minority_wins = 0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const auto& a = amimv[i];
    const std::string tag = "seed " + std::to_string(seeds[i]);
    const double gap = 100.0 * (a.trained.accuracy - random[i].accuracy);
    c.expect(gap >= 10.0, tag + fmt(" (a) amimv %.2f%% vs random %.2f%%", 100 * a.trained.accuracy,
                                    100 * random[i].accuracy));
    const double ma = minority_mean(a.trained), mb = minority_mean(baseline[i].trained);
    if (ma >= mb) ++minority_wins;
    const auto& first = a.run.log.front();
    const auto& last = a.run.log.back();
    c.expect(last.mean_loss < first.mean_loss, tag + fmt(" (c) loss %.4f -> %.4f", first.mean_loss, last.mean_loss));
    c.expect(last.alignment < first.alignment,
             tag + fmt(" (d) alignment %.4f -> %.4f", first.alignment, last.alignment));
    c.expect(last.uniformity < first.uniformity,
             tag + fmt(" (d) uniformity %.4f -> %.4f", first.uniformity, last.uniformity));
    std::printf("  seed %llu: acc amimv %.4f baseline %.4f random %.4f | minority amimv %.4f baseline %.4f | "
                "loss %.4f->%.4f align %.4f->%.4f unif %.4f->%.4f\n",
                static_cast<unsigned long long>(seeds[i]), a.trained.accuracy, baseline[i].trained.accuracy,
                random[i].accuracy, ma, mb, first.mean_loss, last.mean_loss, first.alignment, last.alignment,
                first.uniformity, last.uniformity);
  }
  c.expect(minority_wins >= 2, "(b) minority accuracy amimv >= baseline on " + std::to_string(minority_wins) + "/3 seeds");
  const double elapsed = seconds_since(t0);
  c.expect(elapsed <= 15 * 60.0, fmt("runtime %.0fs", elapsed));
  c.note(fmt("%.0fs wall", elapsed));
  return c.verdict();
}

// ---------------------------------------------------------------------------
// 8. metrics

Verdict criterion_metrics() {
  Checks c;
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const bool pos[] = {false, false, true, true};
  c.expect(roc_auc(s, pos) == 0.75, "AUC example 0.75");
  const std::vector<double> tied(6, 0.3);
  const bool mixed[] = {true, false, true, false, false, true};
  c.expect(roc_auc(tied, mixed) == 0.5, "all-tied AUC 0.5");
  const Tensor flat = Tensor::full({6, 3}, 1.0, DType::float64);
  const auto flat_report = classification_metrics(flat, std::vector<std::int64_t>{0, 1, 2, 0, 1, 2});
  bool half = true;
  for (double a : flat_report.per_class_auc) half = half && a == 0.5;
  c.expect(half && flat_report.macro_auc == 0.5, "all-tied per-class AUC 0.5");

  std::mt19937_64 rng(8);
  std::size_t ok = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t classes = 2 + rng() % 5, n = 1 + rng() % 60;
    std::vector<std::int64_t> labels(n);
    std::vector<double> scores(n * classes);
    for (auto& l : labels) l = static_cast<std::int64_t>(rng() % classes);
    for (auto& v : scores) v = static_cast<double>(rng() % 4);  // ties are common
    const auto r = classification_metrics(Tensor::from_buffer(scores, {n, classes}), labels);
    bool good = r.confusion.size() == classes;
    std::size_t total = 0, diag = 0;
    for (std::size_t i = 0; good && i < classes; ++i) {
      std::size_t row = 0;
      for (std::size_t j = 0; j < classes; ++j) row += r.confusion[i][j];
      const auto support = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), static_cast<std::int64_t>(i)));
      good = good && row == support;
      if (support > 0) good = good && std::abs(r.per_class_accuracy[i] - double(r.confusion[i][i]) / double(support)) <= 1e-12;
      total += row;
      diag += r.confusion[i][i];
    }
    // predictions are argmax with ties to the lowest index
    std::vector<std::size_t> col(classes, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto* row = scores.data() + i * classes;
      col[static_cast<std::size_t>(std::max_element(row, row + classes) - row)]++;
    }
    for (std::size_t j = 0; good && j < classes; ++j) {
      std::size_t sum = 0;
      for (std::size_t i = 0; i < classes; ++i) sum += r.confusion[i][j];
      good = good && sum == col[j];
    }
    good = good && total == n && std::abs(r.accuracy - double(diag) / double(n)) <= 1e-12;
    ok += good;
  }
  c.expect(ok == 1000, std::to_string(ok) + "/1000 confusion identity trials");
  return c.verdict();
}

// ---------------------------------------------------------------------------
// 9. format round trips

Verdict criterion_formats() {
  Checks c;
  amimv::testing::TempDir dir;
  using amimv::testing::read_bytes;

  const ImageDataset ds = open_dataset("synthetic:C=3,counts=30:12:9,size=12,channels=3");
  save_npz(ds, dir / "a.npz");
  const ImageDataset back = load_npz(dir / "a.npz");
  c.expect(serialize_dataset(back) == serialize_dataset(ds), "synthetic dataset survives save/load");
  save_npz(back, dir / "b.npz");
  c.expect(read_bytes(dir / "a.npz") == read_bytes(dir / "b.npz"), "npz bytes stable");
  for (const char* name : {"tiny_gray.npz", "tiny_rgb_deflate.npz"}) {
    const ImageDataset f = load_npz(amimv::testing::fixture(name));
    save_npz(f, dir / name);
    c.expect(serialize_dataset(load_npz(dir / name)) == serialize_dataset(f), std::string(name) + " round trip");
  }

  EncoderConfig enc;
  enc.input_channels = 3;
  EncoderPair pair = init_pair(enc, 5, 0.97);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (auto& p : pair.k)
    for (auto& v : p.value.mutable_data<float>()) v += static_cast<float>(noise(rng));
  save_checkpoint(dir / "ck", pair, {42, 28, "amimv"});
  const Checkpoint ck = load_checkpoint(dir / "ck");
  bool same = ck.pair.q.size() == pair.q.size() && ck.pair.k.size() == pair.k.size();
  for (std::size_t i = 0; same && i < pair.q.size(); ++i)
    same = same_values(ck.pair.q[i].value, pair.q[i].value) && same_values(ck.pair.k[i].value, pair.k[i].value) &&
           ck.pair.q[i].name == pair.q[i].name;
  c.expect(same, "checkpoint parameters bitwise equal");
  c.expect(ck.info.step == 42 && ck.pair.momentum == 0.97, "checkpoint metadata");
  save_checkpoint(dir / "ck2", ck.pair, ck.info);
  c.expect(read_bytes(dir / "ck/checkpoint.bin") == read_bytes(dir / "ck2/checkpoint.bin"), "checkpoint bytes stable");

  const std::vector<std::pair<std::string, std::string>> svgs{
      {"per_class", per_class_svg({0.9, 0.4, std::nan(""), 1.0})},
      {"confusion", confusion_svg({{5, 1, 0}, {2, 7, 1}, {0, 0, 3}})},
      {"embedding", embedding_svg({{0.0, 1.0, 0}, {2.0, -1.0, 1}, {1.0, 0.5, 2}})}};
  for (const auto& [name, text] : svgs) {
    try {
      std::istringstream in(text);
      boost::property_tree::ptree tree;
      boost::property_tree::read_xml(in, tree);
      c.expect(tree.count("svg") == 1 && tree.size() == 1, name + " root element svg");
    } catch (const std::exception& e) {
      c.expect(false, name + " svg parse: " + e.what());
    }
  }
  return c.verdict();
}

}  // namespace

int main() {
  std::set<int> only;
  if (const char* sel = std::getenv("AMIMV_ACCEPTANCE_ONLY")) {
    std::stringstream ss(sel);
    for (std::string item; std::getline(ss, item, ',');)
      if (!item.empty()) only.insert(std::stoi(item));
  }
  const std::vector<std::tuple<int, std::string, std::function<Verdict()>>> criteria{
      {1, "imbalance metrics reproduce published rows", criterion_imbalance},
      {2, "finite-difference gradients", criterion_gradients},
      {3, "contrastive loss closed forms", criterion_loss_forms},
      {4, "stop-gradient and EMA contracts", criterion_stop_gradient},
      {5, "learning-rate schedule", criterion_schedule},
      {6, "bitwise deterministic pretraining", criterion_determinism},
      {7, "desk-scale long-tail experiment", criterion_experiment},
      {8, "classification metrics", criterion_metrics},
      {9, "format round trips", criterion_formats},
  };
  int failed = 0;
  for (const auto& [id, name, fn] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d (%s): %s [%.1fs] %s\n", id, name.c_str(), v.pass ? "PASS" : "FAIL", seconds_since(t0),
                v.detail.c_str());
    std::fflush(stdout);
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
