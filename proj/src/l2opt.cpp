#include "optlens/l2opt.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>

#include "optlens/kernels.hpp"
#include "optlens/rng.hpp"

namespace optlens::l2o {

std::vector<std::pair<std::string, Tensor*>> L2OParams::named_tensors() {
  return {{"wx1", &wx1}, {"wh1", &wh1}, {"b1", &b1},         {"wx2", &wx2},
          {"wh2", &wh2}, {"b2", &b2},   {"head_w", &head_w}, {"head_b", &head_b}};
}

std::vector<std::pair<std::string, const Tensor*>> L2OParams::named_tensors() const {
  return {{"wx1", &wx1}, {"wh1", &wh1}, {"b1", &b1},         {"wx2", &wx2},
          {"wh2", &wh2}, {"b2", &b2},   {"head_w", &head_w}, {"head_b", &head_b}};
}

L2OParams init_l2o(const L2OConfig& cfg, uint64_t seed) {
  if (cfg.hidden < 1) fail("l2o: hidden size must be >= 1");
  const int64_t H = cfg.hidden;
  L2OParams p;
  p.cfg = cfg;
  p.wx1 = Tensor{2, 4 * H};
  p.wh1 = Tensor{H, 4 * H};
  p.b1 = Tensor{4 * H};
  p.wx2 = Tensor{H, 4 * H};
  p.wh2 = Tensor{H, 4 * H};
  p.b2 = Tensor{4 * H};
  p.head_w = Tensor{H, 1};
  p.head_b = Tensor{1};
  Rng rng(seed);
  for (auto& [name, t] : p.named_tensors()) {
    if (name[0] == 'b' || name == "head_b") continue;  // biases start at zero
    const double bound = 1.0 / std::sqrt(static_cast<double>(t->shape[0]));
    for (double& v : t->data) v = rng.uniform(-bound, bound);
  }
  return p;
}

L2OState zero_state(int64_t n_coords, int64_t hidden) {
  L2OState s;
  s.h1 = Tensor{n_coords, hidden};
  s.c1 = Tensor{n_coords, hidden};
  s.h2 = Tensor{n_coords, hidden};
  s.c2 = Tensor{n_coords, hidden};
  return s;
}

std::pair<double, double> preprocess_gradient(double x, double p) {
  if (!std::isfinite(x)) fail("preprocess: non-finite gradient coordinate");
  if (std::fabs(x) >= std::exp(-p))
    return {std::log(std::fabs(x)) / p, x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0)};
  return {-1.0, std::exp(p) * x};
}

Tensor preprocess_features(const std::vector<double>& grad, double p) {
  const int64_t n = static_cast<int64_t>(grad.size());
  Tensor f{n, 2};
  const double cutoff = std::exp(-p);
  const double blowup = std::exp(p);
  for (int64_t i = 0; i < n; ++i) {
    const double x = grad[i];
    if (!std::isfinite(x)) fail("preprocess: non-finite gradient coordinate");
    if (std::fabs(x) >= cutoff) {
      f.at(i, 0) = std::log(std::fabs(x)) / p;
      f.at(i, 1) = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    } else {
      f.at(i, 0) = -1.0;
      f.at(i, 1) = blowup * x;
    }
  }
  return f;
}

namespace {

// Inference twin of the tape's lstm-cell. Loop structure and operation order
// mirror Tape::lstm_cell exactly; the recorded and inference paths must stay
// bit-identical.
void lstm_cell_infer(const Tensor& X, Tensor& h, Tensor& c, const Tensor& Wx, const Tensor& Wh,
                     const Tensor& B) {
  const int64_t N = X.shape[0], I = X.shape[1], Hd = h.shape[1];
  Tensor pre{N, 4 * Hd};
  kern::matmul(X.data.data(), Wx.data.data(), pre.data.data(), N, I, 4 * Hd);
  Tensor hw{N, 4 * Hd};
  kern::matmul(h.data.data(), Wh.data.data(), hw.data.data(), N, Hd, 4 * Hd);
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < N; ++r) {
    double* p = pre.data.data() + r * 4 * Hd;
    const double* q = hw.data.data() + r * 4 * Hd;
    double* hr = h.data.data() + r * Hd;
    double* cr = c.data.data() + r * Hd;
    for (int64_t j = 0; j < 4 * Hd; ++j) p[j] += q[j] + B.data[j];
    for (int64_t j = 0; j < Hd; ++j) {
      const double ig = 1.0 / (1.0 + std::exp(-p[j]));
      const double fg = 1.0 / (1.0 + std::exp(-p[Hd + j]));
      const double gg = std::tanh(p[2 * Hd + j]);
      const double og = 1.0 / (1.0 + std::exp(-p[3 * Hd + j]));
      const double cn = fg * cr[j] + ig * gg;
      hr[j] = og * std::tanh(cn);
      cr[j] = cn;
    }
  }
}

}  // namespace

std::vector<double> l2o_step(const L2OParams& phi, L2OState& state,
                             const std::vector<double>& grad) {
  const int64_t n = static_cast<int64_t>(grad.size());
  if (state.h1.shape[0] != n)
    fail("l2o: state rows " + std::to_string(state.h1.shape[0]) + " != gradient length " +
         std::to_string(n));
  Tensor f = preprocess_features(grad, phi.cfg.preprocess_p);
  lstm_cell_infer(f, state.h1, state.c1, phi.wx1, phi.wh1, phi.b1);
  lstm_cell_infer(state.h1, state.h2, state.c2, phi.wx2, phi.wh2, phi.b2);
  const int64_t H = phi.cfg.hidden;
  std::vector<double> g(n);
  kern::matmul(state.h2.data.data(), phi.head_w.data.data(), g.data(), n, H, 1);
  const double hb = phi.head_b.data[0];
  const double s = phi.cfg.out_scale;
  for (int64_t i = 0; i < n; ++i) g[i] = (g[i] + hb) * s;
  return g;
}

std::vector<double> l2o_peek(const L2OParams& phi, const L2OState& state,
                             const std::vector<double>& grad) {
  L2OState clone = state;
  return l2o_step(phi, clone, grad);
}

double meta_loss(const std::vector<double>& losses, const std::vector<double>& deviations,
                 double beta) {
  double s = 0.0;
  for (double l : losses) s += l;
  double d = 0.0;
  for (double x : deviations) d += x;
  return s + beta * d;
}

ParamNodes param_leaves(nd::Tape& tape, const L2OParams& phi) {
  ParamNodes pn;
  pn.wx1 = tape.leaf(phi.wx1);
  pn.wh1 = tape.leaf(phi.wh1);
  pn.b1 = tape.leaf(phi.b1);
  pn.wx2 = tape.leaf(phi.wx2);
  pn.wh2 = tape.leaf(phi.wh2);
  pn.b2 = tape.leaf(phi.b2);
  pn.head_w = tape.leaf(phi.head_w);
  pn.head_b = tape.leaf(phi.head_b);
  return pn;
}

StateNodes state_constants(nd::Tape& tape, const L2OState& state) {
  StateNodes sn;
  sn.h1 = tape.constant(state.h1);
  sn.c1 = tape.constant(state.c1);
  sn.h2 = tape.constant(state.h2);
  sn.c2 = tape.constant(state.c2);
  return sn;
}

nd::NodeId l2o_step_nodes(nd::Tape& tape, const ParamNodes& pn, StateNodes& sn,
                          nd::NodeId features, double out_scale) {
  const int64_t H = tape.value(sn.h1).shape[1];
  const int64_t n = tape.value(features).shape[0];
  nd::NodeId hc1 = tape.lstm_cell(features, sn.h1, sn.c1, pn.wx1, pn.wh1, pn.b1);
  sn.h1 = tape.slice_cols(hc1, 0, H);
  sn.c1 = tape.slice_cols(hc1, H, 2 * H);
  nd::NodeId hc2 = tape.lstm_cell(sn.h1, sn.h2, sn.c2, pn.wx2, pn.wh2, pn.b2);
  sn.h2 = tape.slice_cols(hc2, 0, H);
  sn.c2 = tape.slice_cols(hc2, H, 2 * H);
  nd::NodeId head = tape.add_row(tape.matmul(sn.h2, pn.head_w), pn.head_b);
  return tape.reshape(tape.mul_scalar(head, out_scale), {n});
}

nd::NodeId deviation_node(nd::Tape& tape, nd::NodeId g, const std::vector<double>& theta_detached,
                          const std::vector<sym::SymmetryGroup>& groups) {
  nd::NodeId total = tape.scalar_const(0.0);
  if (groups.empty()) return total;
  nd::NodeId gt = -1;  // g .* detached theta, built on first use
  auto weighted = [&]() {
    if (gt < 0) gt = tape.mul(g, tape.constant(Tensor::from_vector(theta_detached)));
    return gt;
  };
  for (const auto& grp : groups) {
    nd::NodeId term;
    switch (grp.kind) {
      case sym::Kind::Translation:
        term = tape.sum(tape.index_select(g, grp.x1));
        break;
      case sym::Kind::Rescale:
        term = tape.sub(tape.sum(tape.index_select(weighted(), grp.x1)),
                        tape.sum(tape.index_select(weighted(), grp.x2)));
        break;
      case sym::Kind::Scale:
        term = tape.sum(tape.index_select(weighted(), grp.x1));
        break;
      default:
        fail("deviation: unknown group kind");
    }
    total = tape.add(total, tape.abs(term));
  }
  return total;
}

SegmentOut meta_segment(const L2OParams& phi, L2OState& state, model::ModelParams& m,
                        const std::vector<data::Batch>& batches, double beta,
                        const std::vector<sym::SymmetryGroup>& groups) {
  nd::Tape tape;
  ParamNodes pn = param_leaves(tape, phi);
  StateNodes sn = state_constants(tape, state);
  nd::NodeId theta = tape.constant(Tensor::from_vector(m.theta));

  nd::NodeId loss_sum = -1;
  nd::NodeId dev_sum = -1;
  for (size_t t = 0; t < batches.size(); ++t) {
    nd::NodeId lt = model::loss_node(tape, m.arch, m.layout, theta, batches[t]);
    const double lv = tape.value(lt).data[0];
    if (!std::isfinite(lv))
      fail("meta: non-finite unrolled loss at inner step " + std::to_string(t));
    loss_sum = loss_sum < 0 ? lt : tape.add(loss_sum, lt);

    // the gradient fed to the optimizer is a value, never a graph edge
    model::LossGrad lg =
        model::loss_and_grad(m.arch, m.layout, tape.value(theta).data, batches[t]);
    nd::NodeId features = tape.constant(preprocess_features(lg.grad, phi.cfg.preprocess_p));
    nd::NodeId g = l2o_step_nodes(tape, pn, sn, features, phi.cfg.out_scale);
    if (beta > 0.0 && !groups.empty()) {
      nd::NodeId d = deviation_node(tape, g, tape.value(theta).data, groups);
      dev_sum = dev_sum < 0 ? d : tape.add(dev_sum, d);
    }
    theta = tape.add(theta, g);
  }

  nd::NodeId total = loss_sum;
  if (dev_sum >= 0) total = tape.add(total, tape.mul_scalar(dev_sum, beta));
  tape.set_output(total);

  SegmentOut out;
  out.value = tape.value(total).data[0];
  if (!std::isfinite(out.value)) fail("meta: non-finite meta-loss");

  // carry values across the segment boundary before the tape is spent
  m.theta = tape.value(theta).data;
  state.h1 = tape.value(sn.h1);
  state.c1 = tape.value(sn.c1);
  state.h2 = tape.value(sn.h2);
  state.c2 = tape.value(sn.c2);

  nd::GradMap gm = tape.backward();
  const nd::NodeId ids[8] = {pn.wx1, pn.wh1, pn.b1, pn.wx2, pn.wh2, pn.b2, pn.head_w, pn.head_b};
  const char* names[8] = {"wx1", "wh1", "b1", "wx2", "wh2", "b2", "head_w", "head_b"};
  for (int i = 0; i < 8; ++i) out.grads.emplace_back(names[i], gm.at(ids[i]));
  return out;
}

namespace {

// Adam over the flattened phi tensors; meta_sgd switches to plain descent.
struct MetaOpt {
  double lr;
  bool plain;
  int64_t t = 0;
  std::map<std::string, Tensor> m, v;

  // Diverged inner runs produce meta-gradients orders of magnitude above the
  // healthy regime; unclipped they poison the second-moment EMA for ~1/(1-b2)
  // updates. Global-norm clipping bounds the damage without changing the
  // direction of ordinary steps.
  static constexpr double kGradClip = 50.0;

  void apply(L2OParams& phi, const std::vector<std::pair<std::string, Tensor>>& grads) {
    ++t;
    double sq = 0.0;
    for (const auto& [name, g] : grads)
      for (double gv : g.data) sq += gv * gv;
    const double scale = sq > kGradClip * kGradClip ? kGradClip / std::sqrt(sq) : 1.0;
    auto tensors = phi.named_tensors();
    for (size_t k = 0; k < tensors.size(); ++k) {
      Tensor& w = *tensors[k].second;
      Tensor g = grads[k].second;
      if (scale != 1.0)
        for (double& gv : g.data) gv *= scale;
      if (plain) {
        for (int64_t i = 0; i < w.size(); ++i) w.data[i] -= lr * g.data[i];
        continue;
      }
      Tensor& mk = m[tensors[k].first];
      Tensor& vk = v[tensors[k].first];
      if (mk.data.empty()) {
        mk = Tensor(w.shape);
        vk = Tensor(w.shape);
      }
      const double c1 = 1.0 - std::pow(0.9, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(0.999, static_cast<double>(t));
      for (int64_t i = 0; i < w.size(); ++i) {
        mk.data[i] = 0.9 * mk.data[i] + 0.1 * g.data[i];
        vk.data[i] = 0.999 * vk.data[i] + 0.001 * g.data[i] * g.data[i];
        w.data[i] -= lr * (mk.data[i] / c1) / (std::sqrt(vk.data[i] / c2) + 1e-8);
      }
    }
  }
};

}  // namespace

MetaTrainResult meta_train(const MetaTrainConfig& cfg, const data::Dataset& ds,
                           const model::ArchSpec& arch,
                           const std::function<void(const MetaLogRow&)>& on_segment) {
  if (cfg.unroll < 1) fail("meta-train: unroll must be >= 1");
  if (cfg.max_iters < cfg.unroll) fail("meta-train: max iters below one unroll segment");
  if (cfg.beta < 0.0) fail("meta-train: beta must be >= 0");
  const int64_t segments = cfg.max_iters / cfg.unroll;  // remainder steps are dropped

  std::vector<sym::SymmetryGroup> groups;
  if (cfg.beta > 0.0) {
    auto all = model::enumerate_symmetry_groups(arch);
    if (cfg.reg_kinds.empty()) {
      groups = std::move(all);
    } else {
      for (const auto& g : all)
        for (sym::Kind k : cfg.reg_kinds)
          if (g.kind == k) {
            groups.push_back(g);
            break;
          }
    }
  }

  MetaTrainResult res;
  res.params = init_l2o(cfg.l2o, stream_seed(cfg.seed, "l2o-init"));
  MetaOpt mo;
  mo.lr = cfg.meta_lr;
  mo.plain = cfg.meta_sgd;
  const int64_t n_params = model::param_count(arch);

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int64_t run = 0; run < cfg.runs_per_epoch; ++run) {
      const uint64_t run_index = uint64_t(epoch) * cfg.runs_per_epoch + uint64_t(run);
      model::ModelParams m = model::init_model(arch, stream_seed(cfg.seed, "optimizee-init", run_index));
      L2OState state = zero_state(n_params, cfg.l2o.hidden);
      data::BatchIter batches(ds, cfg.batch_size, stream_seed(cfg.seed, "meta-batching", run_index));
      for (int64_t seg = 0; seg < segments; ++seg) {
        std::vector<data::Batch> bs;
        bs.reserve(cfg.unroll);
        for (int64_t t = 0; t < cfg.unroll; ++t) bs.push_back(batches.next());
        SegmentOut so;
        try {
          so = meta_segment(res.params, state, m, bs, cfg.beta, groups);
        } catch (const Error& e) {
          fail("meta-train: epoch " + std::to_string(epoch) + " run " + std::to_string(run) +
               " segment " + std::to_string(seg) + ": " + e.what());
        }
        mo.apply(res.params, so.grads);
        MetaLogRow row{epoch, run, seg, so.value};
        res.log.push_back(row);
        if (on_segment) on_segment(row);
      }
    }
  }
  return res;
}

// --- checkpoint io -----------------------------------------------------------

namespace {

void put_u16(std::vector<uint8_t>& v, uint16_t x) {
  v.push_back(uint8_t(x));
  v.push_back(uint8_t(x >> 8));
}

void put_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(uint8_t(x >> (8 * i)));
}

struct Cursor {
  const uint8_t* p;
  size_t left;
  const std::string& path;

  void need(size_t n, const char* what) {
    if (left < n) fail("checkpoint: truncated " + std::string(what) + " in " + path);
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t x = uint16_t(p[0]) | uint16_t(p[1]) << 8;
    p += 2;
    left -= 2;
    return x;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= uint32_t(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return x;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    uint8_t x = *p;
    ++p;
    --left;
    return x;
  }
  const uint8_t* bytes(size_t n, const char* what) {
    need(n, what);
    const uint8_t* q = p;
    p += n;
    left -= n;
    return q;
  }
};

}  // namespace

void save_checkpoint(const L2OParams& phi, const std::string& path) {
  std::vector<uint8_t> out;
  out.insert(out.end(), {'O', 'L', 'N', 'S'});
  put_u16(out, 1);

  auto tensors = phi.named_tensors();
  std::vector<std::pair<std::string, Tensor>> extra = {
      {"out_scale", Tensor::scalar(phi.cfg.out_scale)},
      {"preprocess_p", Tensor::scalar(phi.cfg.preprocess_p)},
  };
  put_u32(out, uint32_t(tensors.size() + extra.size()));

  uLong crc = crc32(0L, Z_NULL, 0);
  auto emit = [&](const std::string& name, const Tensor& t) {
    put_u16(out, uint16_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(uint8_t(t.shape.size()));
    for (int64_t d : t.shape) put_u32(out, uint32_t(d));
    const uint8_t* pay = reinterpret_cast<const uint8_t*>(t.data.data());
    const size_t nbytes = t.data.size() * sizeof(double);
    out.insert(out.end(), pay, pay + nbytes);
    crc = crc32(crc, pay, uInt(nbytes));
  };
  for (auto& [name, t] : tensors) emit(name, *t);
  for (auto& [name, t] : extra) emit(name, t);
  put_u32(out, uint32_t(crc));

  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) fail("checkpoint: cannot open " + path + " for writing");
  const size_t w = std::fwrite(out.data(), 1, out.size(), f);
  std::fclose(f);
  if (w != out.size()) fail("checkpoint: short write to " + path);
}

L2OParams load_checkpoint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) fail("checkpoint: cannot open " + path);
  std::vector<uint8_t> raw;
  uint8_t buf[1 << 16];
  size_t got;
  while ((got = std::fread(buf, 1, sizeof buf, f)) > 0) raw.insert(raw.end(), buf, buf + got);
  std::fclose(f);

  Cursor c{raw.data(), raw.size(), path};
  const uint8_t* magic = c.bytes(4, "magic");
  if (std::memcmp(magic, "OLNS", 4) != 0) fail("checkpoint: bad magic in " + path);
  const uint16_t version = c.u16("version");
  if (version != 1) fail("checkpoint: unsupported version " + std::to_string(version));
  const uint32_t count = c.u32("tensor count");

  std::map<std::string, Tensor> tensors;
  uLong crc = crc32(0L, Z_NULL, 0);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t nlen = c.u16("name length");
    const uint8_t* nb = c.bytes(nlen, "name");
    std::string name(reinterpret_cast<const char*>(nb), nlen);
    const uint8_t rank = c.u8("rank");
    std::vector<int64_t> shape;
    for (uint8_t d = 0; d < rank; ++d) shape.push_back(int64_t(c.u32("dim")));
    Tensor t(shape);
    const size_t nbytes = t.data.size() * sizeof(double);
    const uint8_t* pay = c.bytes(nbytes, "payload");
    std::memcpy(t.data.data(), pay, nbytes);
    crc = crc32(crc, pay, uInt(nbytes));
    tensors.emplace(std::move(name), std::move(t));
  }
  const uint32_t want_crc = c.u32("crc");
  if (uint32_t(crc) != want_crc) fail("checkpoint: crc mismatch in " + path);

  auto take = [&](const char* name) -> Tensor {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("checkpoint: missing tensor '" + std::string(name) + "' in " + path);
    return std::move(it->second);
  };

  L2OParams p;
  p.wx1 = take("wx1");
  p.wh1 = take("wh1");
  p.b1 = take("b1");
  p.wx2 = take("wx2");
  p.wh2 = take("wh2");
  p.b2 = take("b2");
  p.head_w = take("head_w");
  p.head_b = take("head_b");
  p.cfg.out_scale = take("out_scale").data[0];
  p.cfg.preprocess_p = take("preprocess_p").data[0];
  if (p.wh1.rank() != 2 || p.wh1.shape[1] != 4 * p.wh1.shape[0])
    fail("checkpoint: wh1 shape " + p.wh1.shape_str() + " is not (H x 4H)");
  p.cfg.hidden = p.wh1.shape[0];
  return p;
}

}  // namespace optlens::l2o
