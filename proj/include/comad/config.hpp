#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "comad/distill.hpp"
#include "comad/errors.hpp"
#include "comad/gating.hpp"
#include "comad/masking.hpp"
#include "comad/vit.hpp"

namespace comad {

// Flat dotted-key configuration. Every ablation axis of the method is a key
// here; unknown keys are rejected so typos cannot silently fall back to a
// default.
struct Config {
  std::int64_t image_size = 64;
  std::int64_t patch_size = 8;
  std::int64_t channels = 3;

  std::int64_t student_dim = 32;
  std::int64_t student_depth = 4;
  std::int64_t student_heads = 2;
  double student_mlp_ratio = 4.0;

  std::int64_t teacher_dim = 64;
  std::int64_t teacher_depth = 4;
  std::int64_t teacher_heads = 4;
  double teacher_mlp_ratio = 4.0;
  std::int64_t teacher_count = 3;
  std::string teacher_dir = "teachers";
  std::int64_t teacher_noise_index = -1;

  double mask_student = 0.75;
  std::vector<double> mask_teachers{0.50, 0.40, 0.30};

  GatingConfig gating;

  LossVariant loss_variant = LossVariant::dual_kl;
  KlDirection kl_direction = KlDirection::student_first;
  std::int64_t projection_dim = 64;

  double lr_peak = 1.5e-4;
  double weight_decay = 0.05;
  std::int64_t batch_size = 32;
  std::int64_t epochs = 20;
  double warmup_fraction = 0.05;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;  // 0 derives step count from epochs and data
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::vector<std::int64_t> teacher_subset;  // empty selects all teachers
  double clip_norm = 0.0;                    // 0 disables clipping
  bool student_jitter = false;

  std::string data_kind = "synthetic";
  std::int64_t data_count = 512;
  std::int64_t data_classes = 8;
  std::uint64_t data_seed = 1234;
  std::string data_path;

  std::int64_t probe_epochs = 60;
  double probe_lr = 0.1;
  double probe_split = 0.8;

  ViTConfig student_vit() const {
    return {image_size, patch_size, channels, student_dim,
            student_depth, student_heads, student_mlp_ratio};
  }
  ViTConfig teacher_vit() const {
    return {image_size, patch_size, channels, teacher_dim,
            teacher_depth, teacher_heads, teacher_mlp_ratio};
  }

  // Teacher ids participating in the run, in subset order.
  std::vector<std::int64_t> effective_teachers() const {
    if (teacher_subset.empty()) {
      std::vector<std::int64_t> all;
      for (std::int64_t i = 0; i < teacher_count; ++i) all.push_back(i);
      return all;
    }
    return teacher_subset;
  }

  MaskSpec mask_spec() const {
    MaskSpec spec;
    spec.r_student = mask_student;
    spec.r_teachers.clear();
    for (std::int64_t id : effective_teachers())
      spec.r_teachers.push_back(mask_teachers[static_cast<std::size_t>(id)]);
    return spec;
  }

  void validate() const {
    student_vit().validate();
    teacher_vit().validate();
    const std::int64_t n = student_vit().num_patches();
    const auto g = static_cast<std::int64_t>(
        std::llround(std::sqrt(static_cast<double>(n))));
    if (g * g != n)
      throw ConfigError("model: patch count " + std::to_string(n) +
                        " is not a perfect square (required by the spatial "
                        "feature map)");
    if (teacher_count < 1) throw ConfigError("teacher.count must be >= 1");
    if (static_cast<std::int64_t>(mask_teachers.size()) != teacher_count)
      throw ConfigError("mask.teachers lists " +
                        std::to_string(mask_teachers.size()) +
                        " ratios for " + std::to_string(teacher_count) +
                        " teachers");
    std::vector<bool> seen(static_cast<std::size_t>(teacher_count), false);
    for (std::int64_t id : teacher_subset) {
      if (id < 0 || id >= teacher_count)
        throw ConfigError("train.teacher_subset id " + std::to_string(id) +
                          " outside [0, " + std::to_string(teacher_count) + ")");
      if (seen[static_cast<std::size_t>(id)])
        throw ConfigError("train.teacher_subset repeats id " +
                          std::to_string(id));
      seen[static_cast<std::size_t>(id)] = true;
    }
    if (teacher_noise_index >= teacher_count)
      throw ConfigError("teacher.noise_index " +
                        std::to_string(teacher_noise_index) +
                        " outside [0, " + std::to_string(teacher_count) + ")");
    mask_spec().validate();
    gating.validate();
    if (projection_dim < 2)
      throw ConfigError("loss.projection_dim must be >= 2");
    if (lr_peak <= 0) throw ConfigError("train.lr_peak must be > 0");
    if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (warmup_fraction < 0 || warmup_fraction >= 1)
      throw ConfigError("train.warmup_fraction must be in [0, 1)");
    if (steps < 0) throw ConfigError("train.steps must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("train.beta1/beta2 must be in [0, 1)");
    if (clip_norm < 0) throw ConfigError("optim.clip_norm must be >= 0");
    if (data_kind != "synthetic" && data_kind != "binary")
      throw ConfigError("data.kind must be synthetic or binary, got '" +
                        data_kind + "'");
    if (data_kind == "binary" && data_path.empty())
      throw ConfigError("data.kind=binary requires data.path");
    if (data_count < 1) throw ConfigError("data.count must be >= 1");
    if (data_count < batch_size)
      throw ConfigError("data.count " + std::to_string(data_count) +
                        " smaller than batch size " +
                        std::to_string(batch_size));
    if (data_classes < 1) throw ConfigError("data.classes must be >= 1");
    if (probe_epochs < 1) throw ConfigError("probe.epochs must be >= 1");
    if (probe_lr <= 0) throw ConfigError("probe.lr must be > 0");
    if (probe_split <= 0 || probe_split >= 1)
      throw ConfigError("probe.split must be in (0, 1)");
  }

  void set(const std::string& key, const std::string& value);
  std::string canonical_string() const;
  std::uint64_t digest() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected unsigned integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : v) {
    if (ch == ',') {
      parts.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(trim(cur));
  return parts;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline void Config::set(const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  using detail::parse_u64;
  if (key == "model.image_size") image_size = parse_int(key, value);
  else if (key == "model.patch_size") patch_size = parse_int(key, value);
  else if (key == "model.channels") channels = parse_int(key, value);
  else if (key == "student.dim") student_dim = parse_int(key, value);
  else if (key == "student.depth") student_depth = parse_int(key, value);
  else if (key == "student.heads") student_heads = parse_int(key, value);
  else if (key == "student.mlp_ratio") student_mlp_ratio = parse_double(key, value);
  else if (key == "teacher.dim") teacher_dim = parse_int(key, value);
  else if (key == "teacher.depth") teacher_depth = parse_int(key, value);
  else if (key == "teacher.heads") teacher_heads = parse_int(key, value);
  else if (key == "teacher.mlp_ratio") teacher_mlp_ratio = parse_double(key, value);
  else if (key == "teacher.count") teacher_count = parse_int(key, value);
  else if (key == "teacher.dir") teacher_dir = value;
  else if (key == "teacher.noise_index") teacher_noise_index = parse_int(key, value);
  else if (key == "mask.student") mask_student = parse_double(key, value);
  else if (key == "mask.teachers") {
    mask_teachers.clear();
    for (const auto& part : detail::split_list(value))
      mask_teachers.push_back(parse_double(key, part));
  } else if (key == "gating.variant") gating.variant = parse_gating_variant(value);
  else if (key == "gating.temperature") gating.temperature = parse_double(key, value);
  else if (key == "gating.differentiable") gating.differentiable = parse_bool(key, value);
  else if (key == "loss.variant") loss_variant = parse_loss_variant(value);
  else if (key == "loss.kl_direction") kl_direction = parse_kl_direction(value);
  else if (key == "loss.projection_dim") projection_dim = parse_int(key, value);
  else if (key == "train.lr_peak") lr_peak = parse_double(key, value);
  else if (key == "train.weight_decay") weight_decay = parse_double(key, value);
  else if (key == "train.batch_size") batch_size = parse_int(key, value);
  else if (key == "train.epochs") epochs = parse_int(key, value);
  else if (key == "train.warmup_fraction") warmup_fraction = parse_double(key, value);
  else if (key == "train.seed") seed = parse_u64(key, value);
  else if (key == "train.steps") steps = parse_int(key, value);
  else if (key == "train.beta1") beta1 = parse_double(key, value);
  else if (key == "train.beta2") beta2 = parse_double(key, value);
  else if (key == "train.teacher_subset") {
    teacher_subset.clear();
    if (!value.empty())
      for (const auto& part : detail::split_list(value))
        teacher_subset.push_back(parse_int(key, part));
  } else if (key == "optim.clip_norm") clip_norm = parse_double(key, value);
  else if (key == "augment.student_jitter") student_jitter = parse_bool(key, value);
  else if (key == "data.kind") data_kind = value;
  else if (key == "data.count") data_count = parse_int(key, value);
  else if (key == "data.classes") data_classes = parse_int(key, value);
  else if (key == "data.seed") data_seed = parse_u64(key, value);
  else if (key == "data.path") data_path = value;
  else if (key == "probe.epochs") probe_epochs = parse_int(key, value);
  else if (key == "probe.lr") probe_lr = parse_double(key, value);
  else if (key == "probe.split") probe_split = parse_double(key, value);
  else
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::string Config::canonical_string() const {
  using detail::fmt_double;
  std::ostringstream os;
  os << "model.image_size=" << image_size << "\n"
     << "model.patch_size=" << patch_size << "\n"
     << "model.channels=" << channels << "\n"
     << "student.dim=" << student_dim << "\n"
     << "student.depth=" << student_depth << "\n"
     << "student.heads=" << student_heads << "\n"
     << "student.mlp_ratio=" << fmt_double(student_mlp_ratio) << "\n"
     << "teacher.dim=" << teacher_dim << "\n"
     << "teacher.depth=" << teacher_depth << "\n"
     << "teacher.heads=" << teacher_heads << "\n"
     << "teacher.mlp_ratio=" << fmt_double(teacher_mlp_ratio) << "\n"
     << "teacher.count=" << teacher_count << "\n"
     << "teacher.noise_index=" << teacher_noise_index << "\n"
     << "mask.student=" << fmt_double(mask_student) << "\n";
  os << "mask.teachers=";
  for (std::size_t i = 0; i < mask_teachers.size(); ++i)
    os << (i ? "," : "") << fmt_double(mask_teachers[i]);
  os << "\n"
     << "gating.variant=" << gating_variant_name(gating.variant) << "\n"
     << "gating.temperature=" << fmt_double(gating.temperature) << "\n"
     << "gating.differentiable=" << (gating.differentiable ? "true" : "false")
     << "\n"
     << "loss.variant="
     << (loss_variant == LossVariant::dual_kl        ? "dual_kl"
         : loss_variant == LossVariant::token_only   ? "token_only"
         : loss_variant == LossVariant::spatial_only ? "spatial_only"
                                                     : "dual_mse")
     << "\n"
     << "loss.kl_direction="
     << (kl_direction == KlDirection::student_first ? "student_first"
                                                    : "teacher_first")
     << "\n"
     << "loss.projection_dim=" << projection_dim << "\n"
     << "train.lr_peak=" << fmt_double(lr_peak) << "\n"
     << "train.weight_decay=" << fmt_double(weight_decay) << "\n"
     << "train.batch_size=" << batch_size << "\n"
     << "train.epochs=" << epochs << "\n"
     << "train.warmup_fraction=" << fmt_double(warmup_fraction) << "\n"
     << "train.seed=" << seed << "\n"
     << "train.steps=" << steps << "\n"
     << "train.beta1=" << fmt_double(beta1) << "\n"
     << "train.beta2=" << fmt_double(beta2) << "\n";
  os << "train.teacher_subset=";
  for (std::size_t i = 0; i < teacher_subset.size(); ++i)
    os << (i ? "," : "") << teacher_subset[i];
  os << "\n"
     << "optim.clip_norm=" << fmt_double(clip_norm) << "\n"
     << "augment.student_jitter=" << (student_jitter ? "true" : "false") << "\n"
     << "data.kind=" << data_kind << "\n"
     << "data.count=" << data_count << "\n"
     << "data.classes=" << data_classes << "\n"
     << "data.seed=" << data_seed << "\n"
     << "data.path=" << data_path << "\n"
     << "probe.epochs=" << probe_epochs << "\n"
     << "probe.lr=" << fmt_double(probe_lr) << "\n"
     << "probe.split=" << fmt_double(probe_split) << "\n";
  return os.str();
}

inline std::uint64_t Config::digest() const {
  const std::string s = canonical_string();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

// Parses `key = value` lines; '#' starts a comment, blank lines are skipped.
inline Config parse_config_text(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value, got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": empty key");
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " +
                        e.what());
    }
  }
  return cfg;
}

inline Config parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config_text(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace comad
