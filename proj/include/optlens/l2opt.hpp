#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "optlens/dataio.hpp"
#include "optlens/optimizee.hpp"
#include "optlens/symmetry.hpp"
#include "optlens/tape.hpp"
#include "optlens/tensor.hpp"

namespace optlens::l2o {

struct L2OConfig {
  int64_t hidden = 20;
  double out_scale = 0.1;
  double preprocess_p = 10.0;
};

// One shared cell stack: every optimizee coordinate runs through the same
// two-layer LSTM; only the (h, c) rows differ per coordinate.
struct L2OParams {
  L2OConfig cfg;
  Tensor wx1, wh1, b1;  // layer 1: input 2 -> hidden
  Tensor wx2, wh2, b2;  // layer 2: hidden -> hidden
  Tensor head_w, head_b;  // hidden -> 1

  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
};

struct L2OState {
  Tensor h1, c1, h2, c2;  // each (num-params x hidden)
};

L2OParams init_l2o(const L2OConfig& cfg, uint64_t seed);
L2OState zero_state(int64_t n_coords, int64_t hidden);

// p=10 log-magnitude encoding: large |x| -> (log|x|/p, sign x), small -> (-1, e^p x)
std::pair<double, double> preprocess_gradient(double x, double p);
Tensor preprocess_features(const std::vector<double>& grad, double p);  // N x 2

// Advances `state` in place and returns the update g (theta is not touched
// here; trajectories apply theta += g themselves). The gradient enters as a
// plain value: inference and the recorded path both treat it as detached.
std::vector<double> l2o_step(const L2OParams& phi, L2OState& state,
                             const std::vector<double>& grad);
// same update, state left untouched (hypothetical-update protocol)
std::vector<double> l2o_peek(const L2OParams& phi, const L2OState& state,
                             const std::vector<double>& grad);

double meta_loss(const std::vector<double>& losses, const std::vector<double>& deviations,
                 double beta);

// --- recorded (differentiable) path -----------------------------------------

struct ParamNodes {
  nd::NodeId wx1, wh1, b1, wx2, wh2, b2, head_w, head_b;
};
struct StateNodes {
  nd::NodeId h1, c1, h2, c2;
};

ParamNodes param_leaves(nd::Tape& tape, const L2OParams& phi);
StateNodes state_constants(nd::Tape& tape, const L2OState& state);

// records one optimizer step; `features` must be a constant node (N x 2).
// State node ids are replaced by the post-step nodes.
nd::NodeId l2o_step_nodes(nd::Tape& tape, const ParamNodes& pn, StateNodes& sn,
                          nd::NodeId features, double out_scale);

// sum of absolute group deviations of the update node `g`, with theta entering
// only as detached values
nd::NodeId deviation_node(nd::Tape& tape, nd::NodeId g, const std::vector<double>& theta_detached,
                          const std::vector<sym::SymmetryGroup>& groups);

// --- meta-training -----------------------------------------------------------

struct MetaTrainConfig {
  int64_t unroll = 20;
  double meta_lr = 0.001;
  int64_t epochs = 50;
  int64_t runs_per_epoch = 20;
  int64_t max_iters = 200;
  int64_t batch_size = 128;
  double beta = 0.0;
  std::vector<sym::Kind> reg_kinds;  // empty = every kind the architecture has
  bool meta_sgd = false;             // plain gradient descent on phi instead of Adam
  uint64_t seed = 1;
  L2OConfig l2o;
};

struct MetaLogRow {
  int64_t epoch, run, segment;
  double meta_loss;
};

struct MetaTrainResult {
  L2OParams params;
  std::vector<MetaLogRow> log;
};

// One unrolled segment: records batches.size() inner steps starting from the
// carried (theta, state), returns the meta-loss and d(meta-loss)/d(phi), and
// leaves theta/state advanced for the next segment (history cut).
struct SegmentOut {
  double value;
  std::vector<std::pair<std::string, Tensor>> grads;
};
SegmentOut meta_segment(const L2OParams& phi, L2OState& state, model::ModelParams& m,
                        const std::vector<data::Batch>& batches, double beta,
                        const std::vector<sym::SymmetryGroup>& groups);

MetaTrainResult meta_train(const MetaTrainConfig& cfg, const data::Dataset& ds,
                           const model::ArchSpec& arch,
                           const std::function<void(const MetaLogRow&)>& on_segment = {});

void save_checkpoint(const L2OParams& phi, const std::string& path);
L2OParams load_checkpoint(const std::string& path);

}  // namespace optlens::l2o
