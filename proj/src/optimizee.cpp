#include "optlens/optimizee.hpp"

#include <cmath>

#include "optlens/rng.hpp"

namespace optlens::model {

const char* act_name(Act a) {
  switch (a) {
    case Act::Sigmoid: return "sigmoid";
    case Act::LeakyRelu: return "leaky-relu";
    case Act::ReluBatchNorm: return "relu-batchnorm";
  }
  return "?";
}

Act act_from_string(const std::string& s) {
  if (s == "sigmoid") return Act::Sigmoid;
  if (s == "leaky-relu") return Act::LeakyRelu;
  if (s == "relu-batchnorm") return Act::ReluBatchNorm;
  fail("arch: unknown activation '" + s + "' (want sigmoid|leaky-relu|relu-batchnorm)");
}

namespace {

void check_arch(const ArchSpec& a) {
  if (a.hidden.empty()) fail("arch: at least one hidden layer required");
  if (a.input < 1 || a.output < 1) fail("arch: dims must be >= 1");
  for (int64_t h : a.hidden)
    if (h < 1) fail("arch: dims must be >= 1");
}

}  // namespace

std::vector<ParamRecord> layout_for(const ArchSpec& arch) {
  check_arch(arch);
  std::vector<ParamRecord> out;
  int64_t off = 0;
  auto push = [&](int layer, Role role, std::vector<int64_t> shape) {
    const int64_t cnt = Tensor::count(shape);
    out.push_back({layer, role, std::move(shape), off, cnt});
    off += cnt;
  };
  std::vector<int64_t> dims;
  dims.push_back(arch.input);
  dims.insert(dims.end(), arch.hidden.begin(), arch.hidden.end());
  dims.push_back(arch.output);
  const int n_layers = static_cast<int>(dims.size()) - 1;
  for (int l = 0; l < n_layers; ++l) {
    push(l, Role::Weight, {dims[l], dims[l + 1]});
    push(l, Role::Bias, {dims[l + 1]});
    if (arch.act == Act::ReluBatchNorm && l < n_layers - 1) {
      push(l, Role::BnGamma, {dims[l + 1]});
      push(l, Role::BnBeta, {dims[l + 1]});
    }
  }
  return out;
}

int64_t param_count(const ArchSpec& arch) {
  int64_t n = 0;
  for (const auto& r : layout_for(arch)) n += r.count;
  return n;
}

ModelParams init_model(const ArchSpec& arch, uint64_t seed) {
  ModelParams m;
  m.arch = arch;
  m.layout = layout_for(arch);
  m.theta.assign(param_count(arch), 0.0);
  Rng rng(stream_seed(seed, "model-init"));
  for (const auto& r : m.layout) {
    switch (r.role) {
      case Role::Weight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(r.shape[0]));
        for (int64_t i = 0; i < r.count; ++i) m.theta[r.offset + i] = rng.uniform(-bound, bound);
        break;
      }
      case Role::Bias:
      case Role::BnBeta:
        break;  // already zero
      case Role::BnGamma:
        for (int64_t i = 0; i < r.count; ++i) m.theta[r.offset + i] = 1.0;
        break;
    }
  }
  return m;
}

nd::NodeId loss_node(nd::Tape& tape, const ArchSpec& arch, const std::vector<ParamRecord>& layout,
                     nd::NodeId theta, const data::Batch& batch) {
  if (batch.x.rank() != 2 || batch.x.shape[1] != arch.input)
    fail("optimizee: batch " + batch.x.shape_str() + " does not match input dim " +
         std::to_string(arch.input));

  auto slice_of = [&](const ParamRecord& r) {
    nd::NodeId s = tape.slice(theta, r.offset, r.count);
    return r.shape.size() == 2 ? tape.reshape(s, r.shape) : s;
  };

  const int last_layer = layout.back().layer;
  nd::NodeId a = tape.constant(batch.x);
  size_t ri = 0;
  while (ri < layout.size()) {
    const int layer = layout[ri].layer;
    nd::NodeId w = slice_of(layout[ri]);
    nd::NodeId b = slice_of(layout[ri + 1]);
    ri += 2;
    nd::NodeId z = tape.add_row(tape.matmul(a, w), b);
    if (layer == last_layer) {
      a = z;  // logits
      break;
    }
    switch (arch.act) {
      case Act::Sigmoid:
        a = tape.sigmoid(z);
        break;
      case Act::LeakyRelu:
        a = tape.leaky_relu(z, arch.leaky_slope);
        break;
      case Act::ReluBatchNorm: {
        nd::NodeId gamma = slice_of(layout[ri]);
        nd::NodeId beta = slice_of(layout[ri + 1]);
        ri += 2;
        nd::NodeId norm = tape.batch_norm(z, arch.bn_eps);
        a = tape.leaky_relu(tape.add_row(tape.mul_row(norm, gamma), beta), 0.0);
        break;
      }
    }
  }

  const int64_t bsz = batch.x.shape[0];
  std::vector<int64_t> picks(bsz);
  for (int64_t i = 0; i < bsz; ++i) picks[i] = i * arch.output + batch.labels[i];
  nd::NodeId lse = tape.log_sum_exp(a);
  nd::NodeId true_logit = tape.index_select(a, std::move(picks));
  return tape.mean(tape.sub(lse, true_logit));
}

LossGrad loss_and_grad(const ArchSpec& arch, const std::vector<ParamRecord>& layout,
                       const std::vector<double>& theta, const data::Batch& batch) {
  nd::Tape tape;
  nd::NodeId t = tape.leaf(Tensor::from_vector(theta));
  nd::NodeId loss = loss_node(tape, arch, layout, t, batch);
  const double lv = tape.value(loss).data[0];
  if (!std::isfinite(lv))
    fail("optimizee: non-finite loss " + std::to_string(lv) + " at batch " +
         std::to_string(batch.index));
  tape.set_output(loss);
  nd::GradMap g = tape.backward();
  return {lv, g.at(t).data};
}

LossGrad loss_and_grad(const ModelParams& m, const data::Batch& batch) {
  return loss_and_grad(m.arch, m.layout, m.theta, batch);
}

double loss_only(const ModelParams& m, const data::Batch& batch) {
  nd::Tape tape;
  nd::NodeId theta = tape.constant(Tensor::from_vector(m.theta));
  nd::NodeId loss = loss_node(tape, m.arch, m.layout, theta, batch);
  return tape.value(loss).data[0];
}

std::vector<sym::SymmetryGroup> enumerate_symmetry_groups(const ArchSpec& arch) {
  const auto layout = layout_for(arch);
  std::vector<sym::SymmetryGroup> out;

  auto record = [&](int layer, Role role) -> const ParamRecord* {
    for (const auto& r : layout)
      if (r.layer == layer && r.role == role) return &r;
    return nullptr;
  };

  const int last = layout.back().layer;
  const ParamRecord* wL = record(last, Role::Weight);
  const ParamRecord* bL = record(last, Role::Bias);

  // softmax translation: one group per storage row of the final weight
  // (= per paper column), plus the output bias as its own group
  for (int64_t i = 0; i < wL->shape[0]; ++i) {
    sym::SymmetryGroup g;
    g.kind = sym::Kind::Translation;
    for (int64_t j = 0; j < wL->shape[1]; ++j) g.x1.push_back(wL->offset + i * wL->shape[1] + j);
    out.push_back(std::move(g));
  }
  {
    sym::SymmetryGroup g;
    g.kind = sym::Kind::Translation;
    for (int64_t j = 0; j < bL->count; ++j) g.x1.push_back(bL->offset + j);
    out.push_back(std::move(g));
  }

  if (arch.act == Act::Sigmoid) return out;

  // hidden neuron j of layer l: incoming weights sit in storage column j of
  // layer l plus bias j; outgoing weights are storage row j of layer l+1
  for (int layer = 0; layer < last; ++layer) {
    const ParamRecord* w = record(layer, Role::Weight);
    const ParamRecord* b = record(layer, Role::Bias);
    const ParamRecord* wn = record(layer + 1, Role::Weight);
    for (int64_t j = 0; j < w->shape[1]; ++j) {
      sym::SymmetryGroup g;
      g.kind = arch.act == Act::LeakyRelu ? sym::Kind::Rescale : sym::Kind::Scale;
      for (int64_t i = 0; i < w->shape[0]; ++i) g.x1.push_back(w->offset + i * w->shape[1] + j);
      g.x1.push_back(b->offset + j);
      if (arch.act == Act::LeakyRelu)
        for (int64_t k = 0; k < wn->shape[1]; ++k) g.x2.push_back(wn->offset + j * wn->shape[1] + k);
      out.push_back(std::move(g));
    }
  }
  return out;
}

}  // namespace optlens::model
