#include "hbfp/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace hbfp {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size())
    throw ConfigError("config: '" + key + "' expects an unsigned integer, got '" + value + "'");
  return out;
}

double to_f64(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double out = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a real number, got '" + value + "'");
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + value + "'");
}

template <class T, class Convert>
std::vector<T> to_list(const std::string& key, const std::string& value, Convert convert) {
  std::vector<T> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty())
      throw ConfigError("config: '" + key + "' has an empty list element in '" + value + "'");
    out.push_back(convert(key, item));
  }
  if (out.empty()) throw ConfigError("config: '" + key + "' expects a non-empty list");
  return out;
}

}  // namespace

void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "seed") cfg.seed = to_u64(key, value);
  else if (key == "image_channels") cfg.image_channels = to_u64(key, value);
  else if (key == "image_height") cfg.image_height = to_u64(key, value);
  else if (key == "image_width") cfg.image_width = to_u64(key, value);
  else if (key == "train_ids") cfg.train_ids = to_u64(key, value);
  else if (key == "test_ids") cfg.test_ids = to_u64(key, value);
  else if (key == "per_id") cfg.per_id = to_u64(key, value);
  else if (key == "cameras") cfg.cameras = to_u64(key, value);
  else if (key == "query_per_id") cfg.query_per_id = to_u64(key, value);
  else if (key == "dataset_path") cfg.dataset_path = value;
  else if (key == "d1") cfg.d1 = to_u64(key, value);
  else if (key == "d2") cfg.d2 = to_u64(key, value);
  else if (key == "d3") cfg.d3 = to_u64(key, value);
  else if (key == "block_depth") cfg.block_depth = to_u64(key, value);
  else if (key == "proj_l") cfg.proj_l = to_u64(key, value);
  else if (key == "proj_l_prime") cfg.proj_l_prime = to_u64(key, value);
  else if (key == "bfp_enabled") cfg.bfp_enabled = to_bool(key, value);
  else if (key == "share_reentry") cfg.share_reentry = to_bool(key, value);
  else if (key == "lambdas") cfg.lambdas = to_list<double>(key, value, to_f64);
  else if (key == "margin") cfg.margin = to_f64(key, value);
  else if (key == "epsilon") cfg.epsilon = to_f64(key, value);
  else if (key == "p_ids") cfg.p_ids = to_u64(key, value);
  else if (key == "k_per_id") cfg.k_per_id = to_u64(key, value);
  else if (key == "lr") cfg.lr = to_f64(key, value);
  else if (key == "weight_decay") cfg.weight_decay = to_f64(key, value);
  else if (key == "epochs") cfg.epochs = to_u64(key, value);
  else if (key == "steps_per_epoch") cfg.steps_per_epoch = to_u64(key, value);
  else if (key == "eval_ranks") cfg.eval_ranks = to_list<std::size_t>(key, value, to_u64);
  else if (key == "workers") cfg.workers = to_u64(key, value);
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "checkpoint_path") cfg.checkpoint_path = value;
  else throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + " is not key=value: '" +
                        line + "'");
    apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  validate_config(cfg);
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << is.rdbuf();
  return parse_config_text(buffer.str());
}

void validate_config(const RunConfig& cfg) {
  auto positive = [](const char* name, std::size_t v) {
    if (v == 0) throw ConfigError(std::string("config: '") + name + "' must be positive");
  };
  positive("image_channels", cfg.image_channels);
  positive("image_height", cfg.image_height);
  positive("image_width", cfg.image_width);
  positive("train_ids", cfg.train_ids);
  positive("test_ids", cfg.test_ids);
  positive("cameras", cfg.cameras);
  positive("d1", cfg.d1);
  positive("d2", cfg.d2);
  positive("d3", cfg.d3);
  positive("block_depth", cfg.block_depth);
  positive("proj_l", cfg.proj_l);
  positive("proj_l_prime", cfg.proj_l_prime);
  positive("p_ids", cfg.p_ids);
  positive("k_per_id", cfg.k_per_id);
  positive("workers", cfg.workers);
  if (cfg.image_height % 4 != 0 || cfg.image_width % 4 != 0)
    throw ConfigError("config: image dims must be divisible by 4 (two stride-2 stages)");
  if (cfg.per_id < 2) throw ConfigError("config: 'per_id' must be >= 2");
  if (cfg.query_per_id == 0 || cfg.query_per_id >= cfg.per_id)
    throw ConfigError("config: 'query_per_id' must lie in [1, per_id)");
  if (cfg.per_id < cfg.cameras + cfg.query_per_id)
    throw ConfigError("config: 'per_id' must be >= cameras + query_per_id");
  if (cfg.margin < 0.0) throw ConfigError("config: 'margin' must be >= 0");
  if (!(cfg.epsilon >= 0.0 && cfg.epsilon < 1.0))
    throw ConfigError("config: 'epsilon' must lie in [0,1)");
  if (cfg.train_ids < 2) throw ConfigError("config: 'train_ids' must be >= 2 for the id loss");
  if (cfg.p_ids > cfg.train_ids)
    throw ConfigError("config: 'p_ids' cannot exceed 'train_ids'");
  if (cfg.k_per_id > cfg.per_id)
    throw ConfigError("config: 'k_per_id' cannot exceed 'per_id'");
  if (cfg.lambdas.empty()) throw ConfigError("config: 'lambdas' must be non-empty");
  for (double l : cfg.lambdas) {
    if (!(l >= 0.0 && l <= 1.0))
      throw ConfigError("config: every lambda must lie in [0,1], got " + std::to_string(l));
  }
  if (cfg.eval_ranks.empty()) throw ConfigError("config: 'eval_ranks' must be non-empty");
  for (std::size_t k : cfg.eval_ranks) {
    if (k == 0) throw ConfigError("config: eval ranks must be >= 1");
  }
  if (!(cfg.lr >= 0.0)) throw ConfigError("config: 'lr' must be >= 0");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("config: 'weight_decay' must be >= 0");
}

std::string config_to_text(const RunConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "seed=" << cfg.seed << "\n";
  os << "image_channels=" << cfg.image_channels << "\n";
  os << "image_height=" << cfg.image_height << "\n";
  os << "image_width=" << cfg.image_width << "\n";
  os << "train_ids=" << cfg.train_ids << "\n";
  os << "test_ids=" << cfg.test_ids << "\n";
  os << "per_id=" << cfg.per_id << "\n";
  os << "cameras=" << cfg.cameras << "\n";
  os << "query_per_id=" << cfg.query_per_id << "\n";
  os << "dataset_path=" << cfg.dataset_path << "\n";
  os << "d1=" << cfg.d1 << "\n";
  os << "d2=" << cfg.d2 << "\n";
  os << "d3=" << cfg.d3 << "\n";
  os << "block_depth=" << cfg.block_depth << "\n";
  os << "proj_l=" << cfg.proj_l << "\n";
  os << "proj_l_prime=" << cfg.proj_l_prime << "\n";
  os << "bfp_enabled=" << (cfg.bfp_enabled ? "true" : "false") << "\n";
  os << "share_reentry=" << (cfg.share_reentry ? "true" : "false") << "\n";
  os << "lambdas=";
  for (std::size_t i = 0; i < cfg.lambdas.size(); ++i)
    os << (i ? "," : "") << cfg.lambdas[i];
  os << "\n";
  os << "margin=" << cfg.margin << "\n";
  os << "epsilon=" << cfg.epsilon << "\n";
  os << "p_ids=" << cfg.p_ids << "\n";
  os << "k_per_id=" << cfg.k_per_id << "\n";
  os << "lr=" << cfg.lr << "\n";
  os << "weight_decay=" << cfg.weight_decay << "\n";
  os << "epochs=" << cfg.epochs << "\n";
  os << "steps_per_epoch=" << cfg.steps_per_epoch << "\n";
  os << "eval_ranks=";
  for (std::size_t i = 0; i < cfg.eval_ranks.size(); ++i)
    os << (i ? "," : "") << cfg.eval_ranks[i];
  os << "\n";
  os << "workers=" << cfg.workers << "\n";
  os << "out_dir=" << cfg.out_dir << "\n";
  os << "checkpoint_path=" << cfg.checkpoint_path << "\n";
  return os.str();
}

}  // namespace hbfp
