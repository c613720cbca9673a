#include "optlens/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "optlens/error.hpp"

namespace optlens::harness {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

KV parse_ini_text(const std::string& text, const std::string& origin) {
  KV kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      fail("config: " + origin + ":" + std::to_string(lineno) +
           ": expected key=value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      fail("config: " + origin + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

KV parse_ini(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_ini_text(buf.str(), path);
}

const std::vector<std::pair<std::string, std::string>>& config_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"arch", "optimizee family: sigmoid | leaky-relu | relu-batchnorm"},
      {"hidden", "comma-separated hidden layer widths (default 20)"},
      {"optimizer", "sgd | adam | lion | blend | l2o"},
      {"checkpoint", "learned-optimizer checkpoint path (l2o runs)"},
      {"seeds", "comma-separated master seeds"},
      {"iters", "trajectory length for meta-test runs"},
      {"batch-size", "minibatch size"},
      {"preprocessing", "normalize | standardize"},
      {"data-dir", "directory holding the IDX files (env OPTLENS_DATA_DIR)"},
      {"out-dir", "output directory"},
      {"log-symmetry", "record symmetry deviations every step (0/1)"},
      {"noise-cadence", "steps between noise collections, 0 disables"},
      {"noise-l", "batches per noise collection"},
      {"noise-m", "batch size per noise collection"},
      {"dump-noise", "write raw noise samples next to the metrics (0/1)"},
      {"lr", "learning rate override (default: tuned per optimizer/arch)"},
      {"momentum", "sgd momentum"},
      {"beta1", "adam/lion beta1 override"},
      {"beta2", "adam/lion beta2 override"},
      {"eps", "adam epsilon"},
      {"weight-decay", "lion decoupled weight decay"},
      {"lambdas", "comma-separated blend weights for blend-sweep"},
      {"unroll", "truncated-unroll segment length"},
      {"epochs", "meta-training epochs"},
      {"runs-per-epoch", "optimizee runs per epoch"},
      {"max-iters", "inner steps per optimizee run"},
      {"meta-lr", "meta-optimizer learning rate"},
      {"meta-sgd", "use plain sgd for the meta-update instead of adam (0/1)"},
      {"beta", "weight on the symmetry regularizer"},
      {"reg-kinds", "comma-separated kinds to regularize"},
      {"l2o-hidden", "lstm hidden width"},
      {"out-scale", "learned-optimizer output scale"},
      {"preprocess-p", "gradient preprocessing constant"},
      {"hist-iters", "iterations captured by the histograms command"},
  };
  return keys;
}

namespace {

bool known_key(const std::string& k) {
  for (auto& [key, desc] : config_keys())
    if (key == k) return true;
  return false;
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail("config: " + key + ": expected integer, got '" + v + "'");
  }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail("config: " + key + ": expected unsigned integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    fail("config: " + key + ": expected number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  fail("config: " + key + ": expected boolean, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : v) {
    if (c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  parts.push_back(cur);
  while (!parts.empty() && parts.back().empty()) parts.pop_back();
  return parts;
}

}  // namespace

RunConfig config_from_kv(const KV& kv) {
  for (auto& [k, v] : kv)
    if (!known_key(k)) fail("config: unknown key '" + k + "'");

  RunConfig c;
  auto get = [&](const char* k) -> const std::string* {
    auto it = kv.find(k);
    return it == kv.end() ? nullptr : &it->second;
  };

  if (auto* v = get("arch")) c.arch = *v;
  if (auto* v = get("hidden")) {
    c.hidden.clear();
    for (auto& p : split_list(*v)) c.hidden.push_back(to_int("hidden", p));
    if (c.hidden.empty()) fail("config: hidden: empty list");
  }
  if (auto* v = get("optimizer")) c.optimizer = *v;
  if (auto* v = get("checkpoint")) c.checkpoint = *v;
  if (auto* v = get("seeds")) {
    c.seeds.clear();
    for (auto& p : split_list(*v)) c.seeds.push_back(to_u64("seeds", p));
    if (c.seeds.empty()) fail("config: seeds: empty list");
  }
  if (auto* v = get("iters")) c.iters = to_int("iters", *v);
  if (auto* v = get("batch-size")) c.batch_size = to_int("batch-size", *v);
  if (auto* v = get("preprocessing"))
    c.preprocessing = data::preprocessing_from_string(*v);
  if (auto* v = get("data-dir")) c.data_dir = *v;
  if (auto* v = get("out-dir")) c.out_dir = *v;
  if (auto* v = get("log-symmetry")) c.log_symmetry = to_bool("log-symmetry", *v);
  if (auto* v = get("noise-cadence"))
    c.noise_cadence = to_int("noise-cadence", *v);
  if (auto* v = get("noise-l")) c.noise_l = to_int("noise-l", *v);
  if (auto* v = get("noise-m")) c.noise_m = to_int("noise-m", *v);
  if (auto* v = get("dump-noise")) c.dump_noise = to_bool("dump-noise", *v);
  if (auto* v = get("lr")) c.lr = to_double("lr", *v);
  if (auto* v = get("momentum")) c.momentum = to_double("momentum", *v);
  if (auto* v = get("beta1")) c.beta1 = to_double("beta1", *v);
  if (auto* v = get("beta2")) c.beta2 = to_double("beta2", *v);
  if (auto* v = get("eps")) c.eps = to_double("eps", *v);
  if (auto* v = get("weight-decay"))
    c.weight_decay = to_double("weight-decay", *v);
  if (auto* v = get("lambdas")) {
    c.lambdas.clear();
    for (auto& p : split_list(*v)) c.lambdas.push_back(to_double("lambdas", p));
    if (c.lambdas.empty()) fail("config: lambdas: empty list");
  }
  if (auto* v = get("unroll")) c.unroll = to_int("unroll", *v);
  if (auto* v = get("epochs")) c.epochs = to_int("epochs", *v);
  if (auto* v = get("runs-per-epoch"))
    c.runs_per_epoch = to_int("runs-per-epoch", *v);
  if (auto* v = get("max-iters")) c.max_iters = to_int("max-iters", *v);
  if (auto* v = get("meta-lr")) c.meta_lr = to_double("meta-lr", *v);
  if (auto* v = get("meta-sgd")) c.meta_sgd = to_bool("meta-sgd", *v);
  if (auto* v = get("beta")) c.beta = to_double("beta", *v);
  if (auto* v = get("reg-kinds")) {
    c.reg_kinds.clear();
    for (auto& p : split_list(*v)) c.reg_kinds.push_back(sym::kind_from_string(p));
  }
  if (auto* v = get("l2o-hidden")) c.l2o_hidden = to_int("l2o-hidden", *v);
  if (auto* v = get("out-scale")) c.out_scale = to_double("out-scale", *v);
  if (auto* v = get("preprocess-p"))
    c.preprocess_p = to_double("preprocess-p", *v);
  if (auto* v = get("hist-iters")) {
    c.hist_iters.clear();
    for (auto& p : split_list(*v))
      c.hist_iters.push_back(to_int("hist-iters", p));
    if (c.hist_iters.empty()) fail("config: hist-iters: empty list");
  }
  return c;
}

model::ArchSpec arch_from_config(const RunConfig& cfg) {
  model::ArchSpec a;
  a.act = model::act_from_string(cfg.arch);
  a.hidden = cfg.hidden;
  return a;
}

double default_lr(const std::string& optimizer, model::Act act) {
  if (optimizer == "sgd") return 0.1;
  if (optimizer == "adam") return 0.05;
  if (optimizer == "lion") {
    switch (act) {
      case model::Act::Sigmoid: return 0.001;
      case model::Act::LeakyRelu: return 0.005;
      case model::Act::ReluBatchNorm: return 0.01;
    }
  }
  fail("config: no tuned learning rate for optimizer '" + optimizer + "'");
}

}  // namespace optlens::harness
