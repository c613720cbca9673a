#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "optlens/dataio.hpp"
#include "optlens/symmetry.hpp"
#include "optlens/tape.hpp"

namespace optlens::model {

enum class Act { Sigmoid, LeakyRelu, ReluBatchNorm };

const char* act_name(Act a);
Act act_from_string(const std::string& s);

struct ArchSpec {
  int64_t input = 784;
  std::vector<int64_t> hidden = {20};
  int64_t output = 10;
  Act act = Act::Sigmoid;
  double leaky_slope = 0.01;
  double bn_eps = 1e-5;
};

enum class Role : uint8_t { Weight, Bias, BnGamma, BnBeta };

// Weights are stored input-major, shape (fan_in x fan_out), so the forward
// pass is plain x·W. The paper's softmax "column i" is then storage row i.
struct ParamRecord {
  int layer;
  Role role;
  std::vector<int64_t> shape;
  int64_t offset;
  int64_t count;
};

struct ModelParams {
  ArchSpec arch;
  std::vector<ParamRecord> layout;
  std::vector<double> theta;
};

std::vector<ParamRecord> layout_for(const ArchSpec& arch);
int64_t param_count(const ArchSpec& arch);

// weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases 0, gamma 1, beta 0
ModelParams init_model(const ArchSpec& arch, uint64_t seed);

// Records softmax cross-entropy (via log-sum-exp) of the network on `tape`,
// reading parameters out of the flat node `theta`. Both the plain gradient
// path and the unrolled meta-training path go through this one builder.
nd::NodeId loss_node(nd::Tape& tape, const ArchSpec& arch, const std::vector<ParamRecord>& layout,
                     nd::NodeId theta, const data::Batch& batch);

struct LossGrad {
  double loss;
  std::vector<double> grad;
};

LossGrad loss_and_grad(const ModelParams& m, const data::Batch& batch);
LossGrad loss_and_grad(const ArchSpec& arch, const std::vector<ParamRecord>& layout,
                       const std::vector<double>& theta, const data::Batch& batch);
double loss_only(const ModelParams& m, const data::Batch& batch);

std::vector<sym::SymmetryGroup> enumerate_symmetry_groups(const ArchSpec& arch);

}  // namespace optlens::model
