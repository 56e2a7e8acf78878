// Acceptance run: one PASS/FAIL line per criterion. Pipeline outputs are
// cached under --work, so a rerun only repeats the cheap checks and the
// reproducibility double run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "rlab/attribution.hpp"
#include "rlab/error.hpp"
#include "rlab/pipeline.hpp"
#include "rlab/retrieval.hpp"
#include "rlab/trainer.hpp"
#include "test_util.hpp"

using namespace rlab;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  return json::parse(is);
}

std::string fmt_double(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::vector<std::map<std::string, std::string>> read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path);
  std::string line;
  std::getline(is, line);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) header.push_back(c);
  }
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::map<std::string, std::string> row;
    size_t i = 0;
    for (std::string c; std::getline(ss, c, ',') && i < header.size(); ++i) row[header[i]] = c;
    rows.push_back(std::move(row));
  }
  return rows;
}

double total_wall_time(const RunManifest& m) {
  double t = 0.0;
  for (const auto& s : m.stages) t += s.wall_time_s;
  return t;
}

double stage_time(const RunManifest& m, const std::string& stage) {
  const StageRecord* r = m.find(stage);
  return r ? r->wall_time_s : 0.0;
}

// --- criteria ----------------------------------------------------------------

Verdict gradient_correctness() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  const int n_configs = 24;
  for (int i = 0; i < n_configs; ++i) worst = std::max(worst, tu::encoder_gradcheck_error(rng, static_cast<uint64_t>(i)));
  const double secs = since(t0);
  return {worst < 1e-3 && secs < 60.0, std::to_string(n_configs) + " configs, max relative error " + fmt_double(worst) +
                                           ", " + fmt_double(secs, 3) + " s"};
}

Verdict chance_floors(const std::string& run, const RunManifest& m) {
  const json rows = read_json(run + "/probe/summary.json").at("rows");
  bool ok = true;
  double worst = 0.0;
  int64_t min_n = INT64_MAX;
  std::set<int> seen_untrained, seen_layer0;
  for (const auto& r : rows) {
    const std::string tag = r.at("model_tag");
    const int n = r.at("n_passages"), layer = r.at("layer");
    const bool untrained = tag.size() > 10 && tag.substr(tag.size() - 10) == "/untrained";
    if (!untrained && layer != 0) continue;
    (untrained ? seen_untrained : seen_layer0).insert(n);
    const double dev = std::abs(r.at("accuracy").get<double>() - 1.0 / n);
    worst = std::max(worst, dev);
    min_n = std::min<int64_t>(min_n, r.at("n_examples").get<int64_t>());
    ok = ok && dev <= 0.05;
  }
  const std::set<int> want = {2, 3, 4, 5};
  ok = ok && seen_untrained == want && seen_layer0 == want && min_n >= 500 && stage_time(m, "probe") < 300.0;
  return {ok, "max |acc - 1/N| " + fmt_double(worst) + " over untrained and layer-0 rows, min held-out " +
                  std::to_string(min_n) + ", probe stage " + fmt_double(stage_time(m, "probe"), 3) + " s"};
}

Verdict probe_signal(const std::string& run) {
  const json s = read_json(run + "/probe/summary.json");
  const int top = s.at("top_layer");
  std::map<int, std::pair<double, double>> by_n;  // n -> (accuracy, p)
  for (const auto& r : s.at("rows"))
    if (r.at("model_tag") == "pretrained" && r.at("layer") == top)
      by_n[r.at("n_passages")] = {r.at("accuracy"), r.at("p_value")};
  bool ok = by_n.size() == 4;
  std::string detail = "top layer " + std::to_string(top) + ":";
  double prev = 2.0;
  for (const auto& [n, ap] : by_n) {
    ok = ok && ap.second < 0.01 && ap.first <= prev;
    prev = ap.first;
    detail += " N=" + std::to_string(n) + " " + fmt_double(ap.first, 3) + " (p=" + fmt_double(ap.second, 2) + ")";
  }
  return {ok, detail};
}

Verdict attribution_exactness(const std::string& run, const RunConfig& cfg, int workers) {
  (void)workers;
  const Checkpoint ck = load_checkpoint(run + "/models/pretrained.ckpt");
  const KnowledgeBase kb = generate_kb(cfg.seed, cfg.corpus_entities, cfg.corpus_relations);
  const QuerySplit qs = make_queries(kb, cfg.corpus_hard_negatives, cfg.corpus_held_out_fraction);
  const auto maps = read_attribution_maps(run + "/attribution/maps_query_pretrained.json");
  if (maps.empty()) return {false, "no attribution maps"};
  const AttributionMap& map = maps.front();
  const Query* q = nullptr;
  for (const auto& x : qs.queries)
    if (x.id == map.input_id) q = &x;
  if (!q) return {false, "attributed query not found"};
  const AttributionObjective obj{kb.vocab.encode_text(q->text),
                                 kb.vocab.encode_text(kb.passages[static_cast<size_t>(q->gold)].text), Tower::kQuery,
                                 q->id};

  // (a) zero-weight neuron: its pre-activation is identically zero.
  ParamStore zeroed = ck.params;
  const int zb = cfg.encoder.n_layers - 1, zi = 17;
  auto& w = zeroed.at("block" + std::to_string(zb) + ".intermediate.weight");
  for (int64_t c = 0; c < w.cols(); ++c) w.at(zi, c) = 0.0f;
  zeroed.at("block" + std::to_string(zb) + ".intermediate.bias")[zi] = 0.0f;
  std::vector<ScaledNeuron> zpts;
  for (int k = 1; k <= 20; ++k) zpts.push_back({{zb, Sublayer::kIntermediate, zi}, k / 20.0f});
  double zero_abs = 0.0;
  for (double g : path_gradients(obj, zeroed, zeroed, ck.config, zpts)) zero_abs = std::max(zero_abs, std::abs(g));

  // (b) a linear-in-alpha objective has a constant path derivative, which
  // every Riemann sum reproduces exactly.
  bool linear_exact = true;
  for (int m : {1, 2, 3, 7, 20, 200, 1000}) {
    linear_exact = linear_exact && riemann_mean([](double) { return -0.8125; }, m) == -0.8125;
    const double slope = 1.25;
    linear_exact = linear_exact && riemann_mean([&](double) { return slope; }, m) == slope;
  }

  // (c) m=20 against m=200 on the top decile of the stored m=20 map.
  std::vector<size_t> order(map.scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return std::abs(map.scores[a]) > std::abs(map.scores[b]); });
  order.resize(std::max<size_t>(1, order.size() / 10));
  std::vector<ScaledNeuron> pts;
  for (size_t i : order)
    for (int k = 1; k <= 200; ++k) pts.push_back({map.neuron_at(i), static_cast<float>(k) / 200.0f});
  const auto g = path_gradients(obj, ck.params, ck.params, ck.config, pts);
  double worst = 0.0;
  int within = 0;
  for (size_t j = 0; j < order.size(); ++j) {
    double s200 = 0.0;
    for (int k = 0; k < 200; ++k) s200 += g[j * 200 + static_cast<size_t>(k)] / 200.0;
    const double rel = std::abs(map.scores[order[j]] - s200) / std::max(std::abs(s200), 1e-12);
    worst = std::max(worst, rel);
    within += rel <= 0.02;
    // Right-endpoint sums carry a first-order bias of (g(1) - g(0)) / (2m).
    if (rel > 0.02)
      std::fprintf(stderr, "  neuron %zu: m20 %.6g m200 %.6g diff %.3g, predicted first-order diff %.3g\n", order[j],
                   map.scores[order[j]], s200, map.scores[order[j]] - s200,
                   (g[j * 200 + 199] - g[j * 200]) * (1.0 / 40 - 1.0 / 400));
  }
  const bool ok = zero_abs == 0.0 && linear_exact && within == static_cast<int>(order.size());
  return {ok, "zero-weight max |dP/da| " + fmt_double(zero_abs) + ", linear exact " + (linear_exact ? "yes" : "no") +
                  ", m=20 vs m=200: " + std::to_string(within) + "/" + std::to_string(order.size()) +
                  " top-decile neurons within 2% (max " + fmt_double(100.0 * worst, 3) + "%)"};
}

Verdict threshold_nesting(const std::string& run) {
  int maps = 0, violations = 0;
  for (const char* f : {"maps_query_pretrained", "maps_query_dpr", "maps_context_pretrained", "maps_context_dpr"}) {
    for (const auto& map : read_attribution_maps(run + "/attribution/" + f + ".json")) {
      ++maps;
      StrongCount prev_count;
      std::vector<char> prev;
      for (double theta : kSweepThresholds) {
        const StrongCount c = strong_neuron_count(map, theta);
        double mx = -INFINITY;
        for (double v : map.scores) mx = std::max(mx, v);
        const auto set = strong_set(map, theta, mx);
        if (!prev.empty()) {
          for (size_t i = 0; i < set.size(); ++i) violations += set[i] && !prev[i];
          violations += c.count > prev_count.count;
        }
        prev = set;
        prev_count = c;
      }
    }
  }
  return {maps > 0 && violations == 0,
          std::to_string(maps) + " maps x " + std::to_string(kSweepThresholds.size()) + " thresholds, " +
              std::to_string(violations) + " containment or count violations"};
}

Verdict retrieval_exactness(const std::string& run, const std::string& scratch) {
  const EmbeddingIndex idx = load_index(run + "/index/dpr.ridx");
  Rng rng(77);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<float> q(static_cast<size_t>(idx.d));
    for (auto& v : q) v = rng.uniform(-1.0f, 1.0f);
    for (int k : {1, 5, 20}) {
      std::vector<Hit> oracle;
      for (int64_t i = 0; i < idx.n; ++i) {
        double s = 0.0;
        for (int64_t c = 0; c < idx.d; ++c)
          s += static_cast<double>(q[static_cast<size_t>(c)]) * idx.matrix[static_cast<size_t>(i * idx.d + c)];
        oracle.push_back({idx.ids[static_cast<size_t>(i)], static_cast<float>(s)});
      }
      std::sort(oracle.begin(), oracle.end(),
                [](const Hit& a, const Hit& b) { return a.score > b.score || (a.score == b.score && a.id < b.id); });
      oracle.resize(static_cast<size_t>(k));
      mismatches += search(idx, q, k).hits != oracle;
    }
  }
  const std::string copy = scratch + "/roundtrip.ridx";
  save_index(idx, copy);
  auto bytes = [](const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  const EmbeddingIndex back = load_index(copy);
  const bool round_trip = bytes(copy) == bytes(run + "/index/dpr.ridx") && back.matrix == idx.matrix &&
                          back.ids == idx.ids && back.titles == idx.titles;
  return {idx.n == 200 && mismatches == 0 && round_trip,
          "1000 queries x k{1,5,20} over " + std::to_string(idx.n) + " passages, " + std::to_string(mismatches) +
              " mismatches, round trip " + (round_trip ? "bit-exact" : "differs")};
}

Verdict dpr_efficacy(const std::string& run, const RunManifest& m) {
  const json s = read_json(run + "/retrieval/summary.json");
  const double delta = s.at("heldout_delta"), total = total_wall_time(m);
  return {delta >= 0.10 && total <= 1800.0,
          "held-out top-1 " + fmt_double(s.at("heldout_top1_pretrained").get<double>(), 3) + " -> " +
              fmt_double(s.at("heldout_top1_dpr").get<double>(), 3) + " (+" + fmt_double(100.0 * delta, 3) +
              " points), full pipeline " + fmt_double(total, 4) + " s"};
}

Verdict edit_locality(const std::string& run) {
  const json s = read_json(run + "/edits/summary.json");
  int n = 0, frozen = 0, flipped = 0, local = 0;
  double worst_delta = -1.0;
  for (const auto& e : s.at("edits")) {
    ++n;
    frozen += e.at("frozen_identical").get<bool>();
    flipped += e.at("masked_flip").get<bool>();
    const double d = e.at("locality_delta");
    local += d <= 0.05 + 1e-12;
    worst_delta = std::max(worst_delta, d);
  }
  bool ok = n > 0 && frozen == n && flipped == n && local == n;
  std::string fpr;
  for (const auto& [method, agg] : s.at("methods").items()) {
    const double r = agg.at("control_false_positive_rate");
    ok = ok && r <= 0.05;
    fpr += " " + method + " " + fmt_double(100.0 * r, 3) + "%";
  }
  return {ok, std::to_string(n) + " edits: frozen identical " + std::to_string(frozen) + ", flipped " +
                  std::to_string(flipped) + ", control drop <= 5 points " + std::to_string(local) + " (max " +
                  fmt_double(100.0 * worst_delta, 3) + "); control false positives" + fpr};
}

Verdict table3_pipeline(const std::string& run) {
  const auto rows = read_csv(run + "/table3/table3.csv");
  bool ok = !rows.empty();
  std::string detail;
  for (const auto& r : rows) {
    const std::string method = r.at("method");
    const int removed = std::stoi(r.at("n_removed_pretrained"));
    const bool unedited = method.rfind("unedited/", 0) == 0;
    if (unedited) {
      const double rate = std::stod(r.at("rate"));
      ok = ok && std::isfinite(rate) && rate <= 0.05;
      detail += " " + method + " rate " + r.at("rate");
    } else {
      const bool has_ci = std::isfinite(std::stod(r.at("ci_low"))) && std::isfinite(std::stod(r.at("ci_high")));
      ok = ok && removed >= 30 && has_ci;
      detail += " " + method + " removed " + std::to_string(removed) + " rate " + r.at("rate") + " [" +
                r.at("ci_low") + ", " + r.at("ci_high") + "]";
    }
  }
  return {ok, detail.empty() ? "no rows" : detail.substr(1)};
}

Verdict reproducibility(const RunConfig& smoke, const std::string& work, int workers) {
  const std::string a = work + "/smoke_a", b = work + "/smoke_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const auto t0 = Clock::now();
  const RunManifest ma = Pipeline(smoke, a, workers).run();
  const RunManifest mb = Pipeline(smoke, b, workers).run();
  const auto ha = hash_tree(a), hb = hash_tree(b);
  int differing = 0;
  for (const auto& [path, h] : ha) differing += !hb.count(path) || hb.at(path) != h;
  differing += static_cast<int>(hb.size() > ha.size() ? hb.size() - ha.size() : 0);
  const bool manifests = ma.to_json(false) == mb.to_json(false);
  return {differing == 0 && manifests && !ha.empty(),
          "two smoke runs: " + std::to_string(ha.size()) + " files, " + std::to_string(differing) +
              " differing, manifests (without wall times) " + (manifests ? "identical" : "differ") + ", " +
              fmt_double(since(t0), 3) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rlab acceptance checks"};
  std::string work = "acceptance", config = std::string(RLAB_SOURCE_DIR) + "/configs/default.conf",
              smoke_config = std::string(RLAB_SOURCE_DIR) + "/configs/smoke.conf";
  int workers = 1;
  bool quiet = true;
  app.add_option("--work", work, "directory holding cached pipeline outputs");
  app.add_option("--config", config, "full-run configuration");
  app.add_option("--smoke-config", smoke_config, "configuration for the reproducibility double run");
  app.add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("!--verbose", quiet, "show pipeline logging");
  CLI11_PARSE(app, argc, argv);
  if (quiet) spdlog::set_level(spdlog::level::warn);

  fs::create_directories(work);
  const std::string run = work + "/full";
  std::vector<std::pair<std::string, Verdict>> results;
  auto check = [&](const std::string& name, const std::function<Verdict()>& f) {
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::printf("[%s] %s: %s\n", v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(name, v);
  };

  check("1 gradient correctness", gradient_correctness);

  RunConfig cfg, smoke;
  RunManifest manifest;
  std::string setup_error;
  try {
    cfg = load_run_config(config);
    smoke = load_run_config(smoke_config);
    manifest = Pipeline(cfg, run, workers).run();
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_run = [&](const std::function<Verdict()>& f) {
    return [&, f]() -> Verdict {
      if (!setup_error.empty()) return {false, "full pipeline failed: " + setup_error};
      return f();
    };
  };
  check("2 chance-level floors", needs_run([&] { return chance_floors(run, manifest); }));
  check("3 probe signal", needs_run([&] { return probe_signal(run); }));
  check("4 attribution exactness", needs_run([&] { return attribution_exactness(run, cfg, workers); }));
  check("5 threshold nesting", needs_run([&] { return threshold_nesting(run); }));
  check("6 retrieval exactness", needs_run([&] { return retrieval_exactness(run, work); }));
  check("7 DPR efficacy", needs_run([&] { return dpr_efficacy(run, manifest); }));
  check("8 edit locality and efficacy", needs_run([&] { return edit_locality(run); }));
  check("9 removal-through-DPR table", needs_run([&] { return table3_pipeline(run); }));
  check("10 reproducibility", [&] { return reproducibility(smoke, work, workers); });

  int failed = 0;
  for (const auto& [name, v] : results) failed += !v.pass;
  std::printf("%d/%zu criteria passed\n", static_cast<int>(results.size()) - failed, results.size());
  return failed == 0 ? 0 : 1;
}
