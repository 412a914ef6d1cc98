// SPDX-License-Identifier: Apache-2.0
#include "dpr/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace dpr {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' wants a number, got '" + v + "'");
  }
}

int to_int(const std::string& key, const std::string& v) {
  double d = to_double(key, v);
  int i = static_cast<int>(d);
  if (double(i) != d) throw ConfigError("config: key '" + key + "' wants an integer, got '" + v + "'");
  return i;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("config: key '" + key + "' wants a boolean, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_int(key, item));
  }
  if (out.empty()) throw ConfigError("config: key '" + key + "' wants a comma-separated integer list");
  return out;
}

}  // namespace

RunConfig RunConfig::parse_text(const std::string& text, const std::string& origin) {
  RunConfig rc;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (auto hash = t.find('#'); hash != std::string::npos) t = trim(t.substr(0, hash));
    if (t.front() == '[' && t.back() == ']') continue;  // section header, cosmetic
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + t + "'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (!seen.insert(key).second)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");

    if (key == "data") rc.data_path = value;
    else if (key == "split_train") rc.split_train = to_double(key, value);
    else if (key == "split_val") rc.split_val = to_double(key, value);
    else if (key == "split_test") rc.split_test = to_double(key, value);
    else if (key == "lookback") rc.lookback = to_int(key, value);
    else if (key == "horizon") rc.horizon = to_int(key, value);
    else if (key == "patch_len") rc.patch_len = to_int(key, value);
    else if (key == "patch_stride") rc.patch_stride = to_int(key, value);
    else if (key == "hidden_dim") rc.hidden_dim = to_int(key, value);
    else if (key == "n_blocks") rc.n_blocks = to_int(key, value);
    else if (key == "mlp_expansion") rc.mlp_expansion = to_double(key, value);
    else if (key == "mlp_hidden") rc.mlp_hidden = to_int(key, value);
    else if (key == "dropout") rc.dropout = to_double(key, value);
    else if (key == "use_adapter") rc.use_adapter = to_bool(key, value);
    else if (key == "patterns") rc.patterns = to_int(key, value);
    else if (key == "context_dim") rc.context_dim = to_int(key, value);
    else if (key == "kernels") rc.kernels = to_int_list(key, value);
    else if (key == "lambda_orth") rc.lambda_orth = to_double(key, value);
    else if (key == "routing") rc.routing = value;
    else if (key == "multiscale") rc.multiscale = to_bool(key, value);
    else if (key == "identity_init") rc.identity_init = to_bool(key, value);
    else if (key == "lr") rc.lr = to_double(key, value);
    else if (key == "batch_size") rc.batch_size = to_int(key, value);
    else if (key == "patience") rc.patience = to_int(key, value);
    else if (key == "max_epochs") rc.max_epochs = to_int(key, value);
    else if (key == "seed") rc.seed = static_cast<std::uint64_t>(to_double(key, value));
    else if (key == "precision") rc.precision = value;
    else if (key == "grad_clip") rc.grad_clip = to_double(key, value);
    else
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  rc.validate();
  return rc;
}

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str(), path);
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "[data]\n";
  out << "data = " << data_path << "\n";
  out << "split_train = " << split_train << "\n";
  out << "split_val = " << split_val << "\n";
  out << "split_test = " << split_test << "\n";
  out << "lookback = " << lookback << "\n";
  out << "horizon = " << horizon << "\n";
  out << "[model]\n";
  out << "patch_len = " << patch_len << "\n";
  out << "patch_stride = " << patch_stride << "\n";
  out << "hidden_dim = " << hidden_dim << "\n";
  out << "n_blocks = " << n_blocks << "\n";
  out << "mlp_expansion = " << mlp_expansion << "\n";
  out << "mlp_hidden = " << mlp_hidden << "\n";
  out << "dropout = " << dropout << "\n";
  out << "use_adapter = " << (use_adapter ? "true" : "false") << "\n";
  out << "[adapter]\n";
  out << "patterns = " << patterns << "\n";
  out << "context_dim = " << context_dim << "\n";
  out << "kernels = ";
  for (std::size_t i = 0; i < kernels.size(); ++i) out << (i ? "," : "") << kernels[i];
  out << "\n";
  out << "lambda_orth = " << lambda_orth << "\n";
  out << "routing = " << routing << "\n";
  out << "multiscale = " << (multiscale ? "true" : "false") << "\n";
  out << "identity_init = " << (identity_init ? "true" : "false") << "\n";
  out << "[train]\n";
  out << "lr = " << lr << "\n";
  out << "batch_size = " << batch_size << "\n";
  out << "patience = " << patience << "\n";
  out << "max_epochs = " << max_epochs << "\n";
  out << "seed = " << seed << "\n";
  out << "precision = " << precision << "\n";
  out << "grad_clip = " << grad_clip << "\n";
  return out.str();
}

void RunConfig::validate() const {
  if (precision != "double" && precision != "single")
    throw ConfigError("config: precision must be 'double' or 'single', got '" + precision + "'");
  if (routing != "soft" && routing != "hard")
    throw ConfigError("config: routing must be 'soft' or 'hard', got '" + routing + "'");
  if (lookback < 2 || horizon < 1) throw ConfigError("config: lookback must be >= 2 and horizon >= 1");
}

void RunConfig::apply_ablation(const std::string& name) {
  if (name == "mscale") multiscale = false;
  else if (name == "ortho") lambda_orth = 0.0;
  else if (name == "init") identity_init = false;
  else if (name == "route") routing = "hard";
  else
    throw ConfigError("unknown ablation '" + name + "' (expected mscale, ortho, init, route)");
}

BackboneConfig RunConfig::backbone(int channels) const {
  BackboneConfig cfg;
  cfg.lookback = lookback;
  cfg.horizon = horizon;
  cfg.channels = channels;
  cfg.patch_len = patch_len;
  cfg.patch_stride = patch_stride;
  cfg.hidden_dim = hidden_dim;
  cfg.n_blocks = n_blocks;
  cfg.mlp_expansion = mlp_expansion;
  cfg.mlp_hidden = mlp_hidden;
  cfg.dropout = dropout;
  cfg.use_adapter = use_adapter;
  cfg.adapter.patterns = patterns;
  cfg.adapter.hidden_dim = hidden_dim;
  cfg.adapter.context_dim = context_dim;
  cfg.adapter.kernels = kernels;
  cfg.adapter.lambda_orth = lambda_orth;
  cfg.adapter.routing = (routing == "hard") ? RoutingMode::kHard : RoutingMode::kSoft;
  cfg.adapter.multiscale = multiscale;
  cfg.adapter.identity_init = identity_init;
  return cfg;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig tc;
  tc.lr = lr;
  tc.batch_size = batch_size;
  tc.patience = patience;
  tc.max_epochs = max_epochs;
  tc.lambda_orth = lambda_orth;
  tc.seed = seed;
  tc.grad_clip = grad_clip;
  return tc;
}

}  // namespace dpr
