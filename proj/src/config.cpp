#include "moelab/config.hpp"

#include <fstream>
#include <sstream>

namespace moelab {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& v, const std::string& key) {
  try {
    long long n = std::stoll(v);
    if (n < 0) throw std::invalid_argument("negative");
    return std::size_t(n);
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for " + key + ": '" + v + "'");
  }
}

double to_double(const std::string& v, const std::string& key) {
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + v + "'");
  }
}

std::vector<double> to_double_list(const std::string& v, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(to_double(trim(cell), key));
  if (out.empty()) throw ConfigError("config: empty list for " + key);
  return out;
}

}  // namespace

void apply_config_entry(PipelineConfig& cfg, const std::string& key,
                        const std::string& value) {
  if (key == "data.num_attributes") cfg.data.num_attributes = to_size(value, key);
  else if (key == "data.values_per_attribute") cfg.data.values_per_attribute = to_size(value, key);
  else if (key == "data.salience") cfg.data.salience = to_double_list(value, key);
  else if (key == "data.noise_sigma") cfg.data.noise_sigma = to_double(value, key);
  else if (key == "data.n_train") cfg.n_train = to_size(value, key);
  else if (key == "data.n_eval") cfg.n_eval = to_size(value, key);
  else if (key == "encoder.dim") cfg.encoder.dim = to_size(value, key);
  else if (key == "encoder.ffn_hidden") cfg.encoder.ffn_hidden = to_size(value, key);
  else if (key == "encoder.blocks_image") cfg.encoder.blocks_image = to_size(value, key);
  else if (key == "encoder.blocks_text") cfg.encoder.blocks_text = to_size(value, key);
  else if (key == "encoder.temperature") cfg.encoder.temperature = to_double(value, key);
  else if (key == "base.epochs") cfg.base.epochs = to_size(value, key);
  else if (key == "base.lr") cfg.base.lr = to_double(value, key);
  else if (key == "base.batch_size") cfg.base.batch_size = to_size(value, key);
  else if (key == "stage.k_image") cfg.stage.k_image = to_size(value, key);
  else if (key == "stage.k_text") cfg.stage.k_text = to_size(value, key);
  else if (key == "stage.epochs") cfg.stage.epochs = to_size(value, key);
  else if (key == "stage.lr") cfg.stage.lr = to_double(value, key);
  else if (key == "stage.batch_size") cfg.stage.batch_size = to_size(value, key);
  else if (key == "mcl.num_stages") cfg.num_stages = to_size(value, key);
  else if (key == "moe.top_k") cfg.top_k = to_size(value, key);
  else if (key == "moe.alpha") cfg.alpha = to_double(value, key);
  else if (key == "router.epochs") cfg.router.epochs = to_size(value, key);
  else if (key == "router.lr") cfg.router.lr = to_double(value, key);
  else if (key == "router.batch_size") cfg.router.batch_size = to_size(value, key);
  else if (key == "seed") cfg.seed = to_size(value, key);
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "threads") cfg.threads = int(to_size(value, key));
  else throw ConfigError("config: unknown key '" + key + "'");

  // input dims always track the data spec
  cfg.encoder.input_dim_image = cfg.data.view_dim();
  cfg.encoder.input_dim_text = cfg.data.view_dim();
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  PipelineConfig cfg;
  cfg.encoder.input_dim_image = cfg.data.view_dim();
  cfg.encoder.input_dim_text = cfg.data.view_dim();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key = value");
    apply_config_entry(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace moelab
