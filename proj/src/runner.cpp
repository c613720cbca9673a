#include "optlens/runner.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "optlens/error.hpp"
#include "optlens/handopt.hpp"
#include "optlens/l2opt.hpp"
#include "optlens/rng.hpp"

namespace optlens::harness {

namespace fs = std::filesystem;

data::Dataset load_data(const RunConfig& cfg) {
  std::string dir = cfg.data_dir;
  if (dir.empty()) {
    const char* env = std::getenv("OPTLENS_DATA_DIR");
    if (env) dir = env;
  }
  if (dir.empty())
    fail("data: no data directory; pass --data-dir (config key data-dir) or set OPTLENS_DATA_DIR");

  auto pick = [&](const char* stem) {
    for (const char* suffix : {"", ".gz"}) {
      fs::path p = fs::path(dir) / (stem + std::string(suffix));
      if (fs::exists(p)) return p.string();
    }
    fail("data: neither " + (fs::path(dir) / stem).string() + " nor its .gz variant exists");
  };
  return data::load_mnist(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"),
                          cfg.preprocessing);
}

std::string arch_label(const RunConfig& cfg) {
  std::string s = cfg.arch;
  if (cfg.hidden != std::vector<int64_t>{20}) {
    s += "-h";
    for (size_t i = 0; i < cfg.hidden.size(); ++i) {
      if (i) s += 'x';
      s += std::to_string(cfg.hidden[i]);
    }
  }
  return s;
}

std::string run_id(const std::string& opt_label, const RunConfig& cfg, uint64_t seed) {
  return opt_label + "-" + arch_label(cfg) + "-s" + std::to_string(seed);
}

Stepper make_stepper(const RunConfig& cfg, const std::string& optimizer,
                     const model::ArchSpec& arch, int64_t n_params, double blend_lambda) {
  Stepper st;
  if (optimizer == "sgd" || optimizer == "adam" || optimizer == "lion") {
    double lr = cfg.lr >= 0.0 ? cfg.lr : default_lr(optimizer, arch.act);
    opt::Optimizer o = [&] {
      if (optimizer == "sgd") return opt::Optimizer::sgd({lr, cfg.momentum}, n_params);
      if (optimizer == "adam")
        return opt::Optimizer::adam({lr, cfg.beta1 >= 0.0 ? cfg.beta1 : 0.9,
                                     cfg.beta2 >= 0.0 ? cfg.beta2 : 0.999, cfg.eps},
                                    n_params);
      return opt::Optimizer::lion({lr, cfg.beta1 >= 0.0 ? cfg.beta1 : 0.9,
                                   cfg.beta2 >= 0.0 ? cfg.beta2 : 0.99, cfg.weight_decay},
                                  n_params);
    }();
    auto shared = std::make_shared<opt::Optimizer>(std::move(o));
    st.label = optimizer;
    st.step = [shared](const std::vector<double>& theta, const std::vector<double>& grad) {
      return shared->step(theta, grad);
    };
    st.peek = [shared](const std::vector<double>& theta, const std::vector<double>& grad) {
      return shared->peek(theta, grad);
    };
    return st;
  }
  if (optimizer == "blend") {
    opt::BlendConfig bc;
    bc.lambda = blend_lambda;
    bc.sgd = {cfg.lr >= 0.0 ? cfg.lr : default_lr("sgd", arch.act), cfg.momentum};
    bc.lion = {default_lr("lion", arch.act), cfg.beta1 >= 0.0 ? cfg.beta1 : 0.9,
               cfg.beta2 >= 0.0 ? cfg.beta2 : 0.99, cfg.weight_decay};
    auto shared = std::make_shared<opt::Optimizer>(opt::Optimizer::blend(bc, n_params));
    st.label = "blend" + format_double(blend_lambda);
    st.step = [shared](const std::vector<double>& theta, const std::vector<double>& grad) {
      return shared->step(theta, grad);
    };
    st.peek = [shared](const std::vector<double>& theta, const std::vector<double>& grad) {
      return shared->peek(theta, grad);
    };
    return st;
  }
  if (optimizer == "l2o") {
    if (cfg.checkpoint.empty()) fail("optimizer l2o needs --checkpoint");
    auto phi = std::make_shared<l2o::L2OParams>(l2o::load_checkpoint(cfg.checkpoint));
    auto state =
        std::make_shared<l2o::L2OState>(l2o::zero_state(n_params, phi->cfg.hidden));
    st.label = "l2o";
    st.step = [phi, state](const std::vector<double>&, const std::vector<double>& grad) {
      return l2o::l2o_step(*phi, *state, grad);
    };
    st.peek = [phi, state](const std::vector<double>&, const std::vector<double>& grad) {
      return l2o::l2o_peek(*phi, *state, grad);
    };
    return st;
  }
  fail("unknown optimizer '" + optimizer + "' (want sgd | adam | lion | blend | l2o)");
}

namespace {

std::vector<double> pool(const std::vector<std::vector<double>>& vs) {
  size_t total = 0;
  for (auto& v : vs) total += v.size();
  std::vector<double> out;
  out.reserve(total);
  for (auto& v : vs) out.insert(out.end(), v.begin(), v.end());
  return out;
}

void push_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(uint8_t(v & 0xff));
  b.push_back(uint8_t(v >> 8));
}
void push_u32(std::vector<uint8_t>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(uint8_t((v >> (8 * i)) & 0xff));
}
void push_u64(std::vector<uint8_t>& b, uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(uint8_t((v >> (8 * i)) & 0xff));
}
void push_f64(std::vector<uint8_t>& b, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  push_u64(b, bits);
}

struct Cursor {
  const uint8_t* p;
  size_t left;
  const std::string& path;
  void need(size_t n) const {
    if (left < n) fail("noise dump: truncated " + path);
  }
  uint16_t u16() {
    need(2);
    uint16_t v = uint16_t(p[0]) | uint16_t(p[1]) << 8;
    p += 2;
    left -= 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    p += 8;
    left -= 8;
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace

void write_noise_dump(const std::string& path, const stats::NoiseSample& ns) {
  if (ns.grad_noise.empty() || ns.grad_noise.size() != ns.update_noise.size())
    fail("noise dump: malformed sample");
  const uint64_t n = ns.grad_noise[0].size();

  std::vector<uint8_t> buf;
  buf.insert(buf.end(), {'O', 'L', 'N', 'D'});
  push_u16(buf, 1);
  push_u32(buf, uint32_t(ns.step));
  push_u32(buf, uint32_t(ns.grad_noise.size()));
  push_u32(buf, uint32_t(ns.batch_size));
  push_u64(buf, n);
  size_t payload_start = buf.size();
  for (auto& v : ns.grad_noise) {
    if (v.size() != n) fail("noise dump: ragged sample");
    for (double d : v) push_f64(buf, d);
  }
  for (auto& v : ns.update_noise) {
    if (v.size() != n) fail("noise dump: ragged sample");
    for (double d : v) push_f64(buf, d);
  }
  uint32_t crc = uint32_t(
      crc32(0, buf.data() + payload_start, uInt(buf.size() - payload_start)));
  push_u32(buf, crc);

  std::ofstream out(path, std::ios::binary);
  if (!out) fail("noise dump: cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size()));
  if (!out) fail("noise dump: write failed for " + path);
}

stats::NoiseSample read_noise_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("noise dump: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  Cursor c{buf.data(), buf.size(), path};
  c.need(4);
  if (std::memcmp(c.p, "OLND", 4) != 0) fail("noise dump: bad magic in " + path);
  c.p += 4;
  c.left -= 4;
  uint16_t ver = c.u16();
  if (ver != 1) fail("noise dump: unsupported version " + std::to_string(ver) + " in " + path);
  stats::NoiseSample ns;
  ns.step = c.u32();
  uint32_t L = c.u32();
  ns.batch_size = c.u32();
  uint64_t n = c.u64();
  const uint8_t* payload = c.p;
  c.need(size_t(2) * L * n * 8 + 4);
  ns.grad_noise.resize(L);
  for (auto& v : ns.grad_noise) {
    v.resize(n);
    for (auto& d : v) d = c.f64();
  }
  ns.update_noise.resize(L);
  for (auto& v : ns.update_noise) {
    v.resize(n);
    for (auto& d : v) d = c.f64();
  }
  uint32_t want = uint32_t(crc32(0, payload, uInt(c.p - payload)));
  uint32_t got = c.u32();
  if (want != got) fail("noise dump: crc mismatch in " + path);
  return ns;
}

namespace {

struct StepAnalysis {
  std::optional<double> alpha_grad, alpha_update, lambda_max;
};

// Degenerate collections (all-zero noise and the like) surface as warnings and
// empty fields; they must not kill a long trajectory.
StepAnalysis analyze_noise(const stats::NoiseSample& ns, uint64_t seed, int64_t step) {
  StepAnalysis a;
  try {
    a.alpha_grad = stats::estimate_tail_index(pool(ns.grad_noise)).alpha;
  } catch (const Error& e) {
    std::cerr << "warning: step " << step << ": gradient tail estimate skipped: " << e.what()
              << "\n";
  }
  try {
    a.alpha_update = stats::estimate_tail_index(pool(ns.update_noise)).alpha;
  } catch (const Error& e) {
    std::cerr << "warning: step " << step << ": update tail estimate skipped: " << e.what()
              << "\n";
  }
  try {
    a.lambda_max = stats::gram_and_top_eig(ns.update_noise, ns.batch_size,
                                           stream_seed(seed, "analysis", uint64_t(step)))
                       .second;
  } catch (const Error& e) {
    std::cerr << "warning: step " << step << ": covariance analysis skipped: " << e.what()
              << "\n";
  }
  return a;
}

}  // namespace

std::vector<MetricsRow> run_trajectory(const RunConfig& cfg, const data::Dataset& ds,
                                       const model::ArchSpec& arch, Stepper& st,
                                       uint64_t seed) {
  if (cfg.iters < 1) fail("run: iters must be >= 1");
  const auto groups = model::enumerate_symmetry_groups(arch);
  model::ModelParams m = model::init_model(arch, seed);
  data::BatchIter iter(ds, cfg.batch_size, seed);
  const std::string rid = run_id(st.label, cfg, seed);

  fs::path dump_dir;
  if (cfg.dump_noise) {
    dump_dir = fs::path(cfg.out_dir) / "noise" / rid;
    fs::create_directories(dump_dir);
  }

  std::vector<MetricsRow> rows;
  rows.reserve(size_t(cfg.iters));
  for (int64_t t = 1; t <= cfg.iters; ++t) {
    data::Batch b = iter.next();
    model::LossGrad lg = model::loss_and_grad(m, b);

    MetricsRow r;
    r.run_id = rid;
    r.seed = seed;
    r.step = t;
    r.loss = lg.loss;

    if (cfg.noise_cadence > 0 && t % cfg.noise_cadence == 0) {
      stats::UpdateFn hypo = [&](const std::vector<double>& g) { return st.peek(m.theta, g); };
      stats::NoiseSample ns = stats::collect_noise(m, hypo, ds, cfg.noise_l, cfg.noise_m, seed, t);
      StepAnalysis a = analyze_noise(ns, seed, t);
      r.alpha_grad = a.alpha_grad;
      r.alpha_update = a.alpha_update;
      r.lambda_max = a.lambda_max;
      if (cfg.dump_noise)
        write_noise_dump((dump_dir / ("step-" + std::to_string(t) + ".olnd")).string(), ns);
    }

    std::vector<double> g = st.step(m.theta, lg.grad);
    if (cfg.log_symmetry) {
      // deviations are of the applied update at the pre-update theta; the raw
      // gradient satisfies the constraints by construction
      sym::DeviationReport rep = sym::deviation_report(g, m.theta, groups);
      if (rep.n_translation > 0) r.dev_translation = rep.translation;
      if (rep.n_rescale > 0) r.dev_rescale = rep.rescale;
      if (rep.n_scale > 0) r.dev_scale = rep.scale;
    }
    r.upd_q25 = abs_quantile(g, 0.25);
    r.upd_q50 = abs_quantile(g, 0.50);
    r.upd_q75 = abs_quantile(g, 0.75);
    for (size_t i = 0; i < m.theta.size(); ++i) m.theta[i] += g[i];

    rows.push_back(std::move(r));
  }
  return rows;
}

void write_histograms(const std::string& path, const std::vector<HistBlock>& blocks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("histograms: cannot open " + path + " for writing");
  out << "# schema=1\n";
  for (const auto& b : blocks) {
    out << "[hist optimizer=" << b.optimizer << " iteration=" << b.iteration << "]\n";
    out << "edges=";
    for (size_t i = 0; i < b.hist.edges.size(); ++i) {
      if (i) out << ',';
      out << format_double(b.hist.edges[i]);
    }
    out << "\ncounts=";
    for (size_t i = 0; i < b.hist.counts.size(); ++i) {
      if (i) out << ',';
      out << b.hist.counts[i];
    }
    out << "\n";
  }
  if (!out) fail("histograms: write failed for " + path);
}

int cmd_meta_train(const RunConfig& cfg) {
  data::Dataset ds = load_data(cfg);
  model::ArchSpec arch = arch_from_config(cfg);

  l2o::MetaTrainConfig mc;
  mc.unroll = cfg.unroll;
  mc.meta_lr = cfg.meta_lr;
  mc.epochs = cfg.epochs;
  mc.runs_per_epoch = cfg.runs_per_epoch;
  mc.max_iters = cfg.max_iters;
  mc.batch_size = cfg.batch_size;
  mc.beta = cfg.beta;
  mc.reg_kinds = cfg.reg_kinds;
  mc.meta_sgd = cfg.meta_sgd;
  mc.seed = cfg.seeds.front();
  mc.l2o = {cfg.l2o_hidden, cfg.out_scale, cfg.preprocess_p};

  fs::create_directories(cfg.out_dir);
  const std::string rid =
      run_id("l2o-beta" + format_double(cfg.beta), cfg, mc.seed);

  std::vector<MetaLossRow> log;
  int64_t last_epoch = -1;
  double epoch_sum = 0.0;
  int64_t epoch_n = 0;
  auto on_segment = [&](const l2o::MetaLogRow& row) {
    log.push_back({row.epoch, row.run, row.segment, row.meta_loss});
    if (row.epoch != last_epoch) {
      if (epoch_n > 0)
        std::cout << "epoch " << last_epoch << ": mean meta-loss "
                  << epoch_sum / double(epoch_n) << "\n";
      last_epoch = row.epoch;
      epoch_sum = 0.0;
      epoch_n = 0;
    }
    epoch_sum += row.meta_loss;
    ++epoch_n;
  };
  l2o::MetaTrainResult res = l2o::meta_train(mc, ds, arch, on_segment);
  if (epoch_n > 0)
    std::cout << "epoch " << last_epoch << ": mean meta-loss " << epoch_sum / double(epoch_n)
              << "\n";

  const std::string ckpt = (fs::path(cfg.out_dir) / (rid + ".olns")).string();
  l2o::save_checkpoint(res.params, ckpt);
  const std::string losses = (fs::path(cfg.out_dir) / ("metaloss-" + rid + ".csv")).string();
  write_meta_loss(losses, log);
  std::cout << "wrote " << ckpt << "\nwrote " << losses << " (" << log.size() << " rows)\n";
  return 0;
}

int cmd_meta_test(const RunConfig& cfg) {
  data::Dataset ds = load_data(cfg);
  model::ArchSpec arch = arch_from_config(cfg);
  const int64_t n = model::param_count(arch);
  fs::create_directories(cfg.out_dir);

  for (uint64_t seed : cfg.seeds) {
    Stepper st = make_stepper(cfg, cfg.optimizer, arch, n, cfg.lambdas.front());
    std::vector<MetricsRow> rows = run_trajectory(cfg, ds, arch, st, seed);
    const std::string path =
        (fs::path(cfg.out_dir) / ("metrics-" + rows.front().run_id + ".csv")).string();
    write_metrics(path, rows);
    std::cout << "wrote " << path << " (" << rows.size() << " rows)\n";
  }
  return 0;
}

int cmd_blend_sweep(const RunConfig& cfg) {
  data::Dataset ds = load_data(cfg);
  model::ArchSpec arch = arch_from_config(cfg);
  const int64_t n = model::param_count(arch);
  fs::create_directories(cfg.out_dir);

  for (double lambda : cfg.lambdas) {
    for (uint64_t seed : cfg.seeds) {
      Stepper st = make_stepper(cfg, "blend", arch, n, lambda);
      std::vector<MetricsRow> rows = run_trajectory(cfg, ds, arch, st, seed);
      const std::string path =
          (fs::path(cfg.out_dir) / ("metrics-" + rows.front().run_id + ".csv")).string();
      write_metrics(path, rows);
      std::cout << "wrote " << path << " (" << rows.size() << " rows)\n";
    }
  }
  return 0;
}

int cmd_histograms(const RunConfig& cfg) {
  data::Dataset ds = load_data(cfg);
  model::ArchSpec arch = arch_from_config(cfg);
  const int64_t n = model::param_count(arch);
  fs::create_directories(cfg.out_dir);

  std::vector<int64_t> iters = cfg.hist_iters;
  std::sort(iters.begin(), iters.end());
  if (iters.front() < 1) fail("histograms: iterations must be >= 1");
  const int64_t total = iters.back();
  const uint64_t seed = cfg.seeds.front();
  const std::vector<double> edges = stats::default_log_edges();

  std::vector<std::string> opts = {"sgd", "adam", "lion"};
  if (!cfg.checkpoint.empty()) opts.push_back("l2o");

  std::vector<HistBlock> blocks;
  for (const auto& name : opts) {
    Stepper st = make_stepper(cfg, name, arch, n, cfg.lambdas.front());
    model::ModelParams m = model::init_model(arch, seed);
    data::BatchIter iter(ds, cfg.batch_size, seed);
    for (int64_t t = 1; t <= total; ++t) {
      data::Batch b = iter.next();
      model::LossGrad lg = model::loss_and_grad(m, b);
      std::vector<double> g = st.step(m.theta, lg.grad);
      if (std::binary_search(iters.begin(), iters.end(), t))
        blocks.push_back({name, t, stats::update_histogram(g, edges)});
      for (size_t i = 0; i < m.theta.size(); ++i) m.theta[i] += g[i];
    }
  }
  const std::string path = (fs::path(cfg.out_dir) / "histograms.txt").string();
  write_histograms(path, blocks);
  std::cout << "wrote " << path << " (" << blocks.size() << " blocks)\n";
  return 0;
}

int cmd_analyze(const RunConfig& cfg) {
  const fs::path root = fs::path(cfg.out_dir) / "noise";
  if (!fs::exists(root)) fail("analyze: no noise dumps under " + root.string());

  std::vector<std::pair<std::string, fs::path>> files;  // (run id, dump)
  for (const auto& run : fs::directory_iterator(root)) {
    if (!run.is_directory()) continue;
    for (const auto& f : fs::directory_iterator(run.path()))
      if (f.path().extension() == ".olnd")
        files.emplace_back(run.path().filename().string(), f.path());
  }
  if (files.empty()) fail("analyze: no .olnd files under " + root.string());

  struct Row {
    std::string run_id;
    int64_t step;
    StepAnalysis a;
  };
  std::vector<Row> rows;
  for (auto& [rid, path] : files) {
    stats::NoiseSample ns = read_noise_dump(path.string());
    rows.push_back({rid, ns.step, analyze_noise(ns, cfg.seeds.front(), ns.step)});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    return a.run_id != b.run_id ? a.run_id < b.run_id : a.step < b.step;
  });

  const std::string path = (fs::path(cfg.out_dir) / "analysis.csv").string();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("analyze: cannot open " + path + " for writing");
  out << "# schema=1\nrun_id,step,alpha_grad,alpha_update,lambda_max\n";
  auto field = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  for (const auto& r : rows)
    out << r.run_id << ',' << r.step << ',' << field(r.a.alpha_grad) << ','
        << field(r.a.alpha_update) << ',' << field(r.a.lambda_max) << '\n';
  if (!out) fail("analyze: write failed for " + path);
  std::cout << "wrote " << path << " (" << rows.size() << " rows)\n";
  return 0;
}

}  // namespace optlens::harness
