#include "opama/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "opama/error.hpp"

namespace opama {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty())
    throw ContractError("config: bad value for " + key + ": '" + v + "'");
  return out;
}

std::vector<int> parse_int_list(const std::string& key, std::string v) {
  if (!v.empty() && v.front() == '[') v.erase(0, 1);
  if (!v.empty() && v.back() == ']') v.pop_back();
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int>(key, item));
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  auto as_int = [&] { return parse_number<int>(key, v); };
  auto as_double = [&] { return parse_number<double>(key, v); };
  if (key == "T") T = as_int();
  else if (key == "beta_start") beta_start = as_double();
  else if (key == "beta_end") beta_end = as_double();
  else if (key == "sample_steps") sample_steps = as_int();
  else if (key == "cfg_scale") cfg_scale = as_double();
  else if (key == "pano_w") pano_w = as_int();
  else if (key == "pano_h") pano_h = as_int();
  else if (key == "view_fov") view_fov = as_double();
  else if (key == "n_yaw") n_yaw = as_int();
  else if (key == "view_size") view_size = as_int();
  else if (key == "cond_size") cond_size = as_int();
  else if (key == "gma_active_scales") gma_active_scales = parse_int_list(key, v);
  else if (key == "d_model") d_model = as_int();
  else if (key == "ssm_state") ssm_state = as_int();
  else if (key == "vcr_blocks") vcr_blocks = as_int();
  else if (key == "gma_width") gma_width = as_int();
  else if (key == "unet_base") unet_base = as_int();
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "lr") lr = as_double();
  else if (key == "weight_decay") weight_decay = as_double();
  else if (key == "warmup_steps") warmup_steps = as_int();
  else if (key == "corpus_size") corpus_size = as_int();
  else if (key == "text_drop") text_drop = as_double();
  else if (key == "vocab") vocab = v;
  else throw ContractError("config: unknown key '" + key + "'");
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ContractError("config: " + msg);
  };
  require(T >= 1, "T must be >= 1");
  require(beta_start > 0 && beta_end < 1 && beta_start <= beta_end, "need 0 < beta_start <= beta_end < 1");
  require(sample_steps >= 1 && sample_steps <= T, "sample_steps must be in 1..T");
  require(pano_h >= 2 && pano_w == 2 * pano_h, "pano_w must equal 2 * pano_h");
  require(view_fov > 0 && view_fov <= 120, "view_fov must be in (0, 120]");
  require(n_yaw >= 1, "n_yaw must be >= 1");
  require(view_size >= 32 && view_size % 32 == 0, "view_size must be a multiple of 32");
  require(cond_size >= 64 && cond_size % 64 == 0, "cond_size must be a multiple of 64");
  require(cond_size == 2 * view_size, "cond_size must be 2 * view_size");
  for (int s : gma_active_scales) require(s >= 1 && s <= 4, "gma_active_scales entries must be in 1..4");
  require(d_model >= 1 && ssm_state >= 1 && vcr_blocks >= 0 && gma_width >= 1, "widths must be positive");
  require(unet_base >= 8 && unet_base % 8 == 0, "unet_base must be a positive multiple of 8");
  require(lr > 0 && weight_decay >= 0, "lr must be > 0 and weight_decay >= 0");
  require(warmup_steps >= 0 && corpus_size >= 1, "warmup_steps >= 0 and corpus_size >= 1");
  require(text_drop >= 0 && text_drop <= 1, "text_drop must be in [0, 1]");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "T = " << T << "\n"
     << "beta_start = " << fmt(beta_start) << "\n"
     << "beta_end = " << fmt(beta_end) << "\n"
     << "sample_steps = " << sample_steps << "\n"
     << "cfg_scale = " << fmt(cfg_scale) << "\n"
     << "pano_w = " << pano_w << "\n"
     << "pano_h = " << pano_h << "\n"
     << "view_fov = " << fmt(view_fov) << "\n"
     << "n_yaw = " << n_yaw << "\n"
     << "view_size = " << view_size << "\n"
     << "cond_size = " << cond_size << "\n"
     << "gma_active_scales = [";
  for (std::size_t i = 0; i < gma_active_scales.size(); ++i) os << (i ? "," : "") << gma_active_scales[i];
  os << "]\n"
     << "d_model = " << d_model << "\n"
     << "ssm_state = " << ssm_state << "\n"
     << "vcr_blocks = " << vcr_blocks << "\n"
     << "gma_width = " << gma_width << "\n"
     << "unet_base = " << unet_base << "\n"
     << "seed = " << seed << "\n"
     << "lr = " << fmt(lr) << "\n"
     << "weight_decay = " << fmt(weight_decay) << "\n"
     << "warmup_steps = " << warmup_steps << "\n"
     << "corpus_size = " << corpus_size << "\n"
     << "text_drop = " << fmt(text_drop) << "\n";
  if (!vocab.empty()) os << "vocab = " << vocab << "\n";
  return os.str();
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace opama
