#include "bnas/runconfig.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <vector>

#include "bnas/checkpoint.hpp"

namespace bnas {

namespace {

enum class ValueKind { String, Bool, Number };

struct Value {
  ValueKind kind;
  std::string text;  // unquoted for strings
};

struct Field {
  const char* section;  // "" for top-level keys
  const char* key;
  std::function<std::string(const RunConfig&)> emit;
  std::function<void(RunConfig&, const Value&, const std::string& where)> set;
};

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + '"';
}

template <class T>
std::string number_text(T v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if constexpr (std::is_floating_point_v<T>) {
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  }
  return s;
}

template <class T>
T parse_number(const Value& v, const std::string& where) {
  if (v.kind != ValueKind::Number) throw ConfigError(where + ": expected a number");
  T out{};
  const char* first = v.text.data();
  const char* last = first + v.text.size();
  if (*first == '+') ++first;
  auto res = std::from_chars(first, last, out);
  if (res.ec != std::errc() || res.ptr != last) throw ConfigError(where + ": '" + v.text + "' is not a valid value");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(out)) throw ConfigError(where + ": value must be finite");
  }
  return out;
}

// A gamma of "inf" is the Zeroise-free selection rule.
double parse_gamma(const Value& v, const std::string& where) {
  if (v.kind == ValueKind::String && (v.text == "inf" || v.text == "infinity")) {
    return std::numeric_limits<double>::infinity();
  }
  return parse_number<double>(v, where);
}

std::string gamma_text(double g) { return std::isinf(g) ? "\"inf\"" : number_text(g); }

template <class T>
Field num(const char* section, const char* key, T RunConfig::*outer) {
  return {section, key, [outer](const RunConfig& c) { return number_text(c.*outer); },
          [outer](RunConfig& c, const Value& v, const std::string& w) { c.*outer = parse_number<T>(v, w); }};
}

template <class S, class T>
Field num(const char* section, const char* key, S RunConfig::*sub, T S::*member) {
  return {section, key, [sub, member](const RunConfig& c) { return number_text(c.*sub.*member); },
          [sub, member](RunConfig& c, const Value& v, const std::string& w) { c.*sub.*member = parse_number<T>(v, w); }};
}

template <class S>
Field flag(const char* section, const char* key, S RunConfig::*sub, bool S::*member) {
  return {section, key, [sub, member](const RunConfig& c) { return std::string(c.*sub.*member ? "true" : "false"); },
          [sub, member](RunConfig& c, const Value& v, const std::string& w) {
            if (v.kind != ValueKind::Bool) throw ConfigError(w + ": expected true or false");
            c.*sub.*member = v.text == "true";
          }};
}

template <class S>
Field str(const char* section, const char* key, S RunConfig::*sub, std::string S::*member) {
  return {section, key, [sub, member](const RunConfig& c) { return quote(c.*sub.*member); },
          [sub, member](RunConfig& c, const Value& v, const std::string& w) {
            if (v.kind != ValueKind::String) throw ConfigError(w + ": expected a quoted string");
            c.*sub.*member = v.text;
          }};
}

const std::vector<Field>& fields() {
  using R = RunConfig;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(num("", "seed", &R::seed));
    f.push_back({"", "out", [](const R& c) { return quote(c.out); },
                 [](R& c, const Value& v, const std::string& w) {
                   if (v.kind != ValueKind::String) throw ConfigError(w + ": expected a quoted string");
                   c.out = v.text;
                 }});

    f.push_back(str("data", "cifar_dir", &R::data, &DataSection::cifar_dir));
    f.push_back(num("data", "seed", &R::data, &DataSection::seed));
    f.push_back(num("data", "synthetic_train", &R::data, &DataSection::synthetic_train));
    f.push_back(num("data", "synthetic_test", &R::data, &DataSection::synthetic_test));
    f.push_back(num("data", "synthetic_noise", &R::data, &DataSection::synthetic_noise));
    f.push_back(num("data", "train_subset", &R::data, &DataSection::train_subset));
    f.push_back(num("data", "test_subset", &R::data, &DataSection::test_subset));
    f.push_back(num("data", "downsample", &R::data, &DataSection::downsample));
    f.push_back(num("data", "split_fraction", &R::data, &DataSection::split_fraction));

    f.push_back(num("search", "num_cells", &R::search, &SearchConfig::num_cells));
    f.push_back(num("search", "init_channels", &R::search, &SearchConfig::init_channels));
    f.push_back(num("search", "epochs", &R::search, &SearchConfig::epochs));
    f.push_back(num("search", "batch_size", &R::search, &SearchConfig::batch_size));
    f.push_back(num("search", "weight_lr", &R::search, &SearchConfig::weight_lr));
    f.push_back(num("search", "weight_lr_min", &R::search, &SearchConfig::weight_lr_min));
    f.push_back(num("search", "weight_momentum", &R::search, &SearchConfig::weight_momentum));
    f.push_back(num("search", "weight_decay", &R::search, &SearchConfig::weight_decay));
    f.push_back(num("search", "lambda", &R::search, &SearchConfig::lambda));
    f.push_back(num("search", "tau", &R::search, &SearchConfig::tau));
    f.push_back(num("search", "arch_lr", &R::search, &SearchConfig::arch_lr));
    f.push_back(num("search", "arch_beta1", &R::search, &SearchConfig::arch_beta1));
    f.push_back(num("search", "arch_beta2", &R::search, &SearchConfig::arch_beta2));
    f.push_back(num("search", "grad_clip", &R::search, &SearchConfig::grad_clip));
    f.push_back({"search", "gamma", [](const R& c) { return gamma_text(c.search.gamma); },
                 [](R& c, const Value& v, const std::string& w) { c.search.gamma = parse_gamma(v, w); }});
    f.push_back(flag("search", "inter_cell_skip", &R::search, &SearchConfig::inter_cell_skip));
    f.push_back(str("search", "space", &R::search, &SearchConfig::space));
    f.push_back({"search", "augment", [](const R& c) { return quote(std::string(to_string(c.search.augment))); },
                 [](R& c, const Value& v, const std::string& w) {
                   if (v.kind != ValueKind::String) throw ConfigError(w + ": expected a quoted string");
                   try {
                     c.search.augment = augment_set_from_string(v.text);
                   } catch (const std::invalid_argument& e) {
                     throw ConfigError(w + ": " + e.what());
                   }
                 }});
    f.push_back(num("search", "max_steps_per_epoch", &R::search, &SearchConfig::max_steps_per_epoch));

    f.push_back(str("train", "preset", &R::train, &TrainSection::preset));
    f.push_back(num("train", "num_cells", &R::train, &TrainSection::num_cells));
    f.push_back(num("train", "init_channels", &R::train, &TrainSection::init_channels));
    f.push_back(flag("train", "stem_group_conv", &R::train, &TrainSection::stem_group_conv));
    f.push_back(flag("train", "inter_cell_skip", &R::train, &TrainSection::inter_cell_skip));
    f.push_back(str("train", "scheme", &R::train, &TrainSection::scheme));
    f.push_back(num("train", "epochs", &R::train, &TrainSection::epochs));
    f.push_back(num("train", "batch_size", &R::train, &TrainSection::batch_size));
    f.push_back(num("train", "max_steps_per_epoch", &R::train, &TrainSection::max_steps_per_epoch));
    f.push_back(flag("train", "log_grad_norms", &R::train, &TrainSection::log_grad_norms));
    f.push_back(num("train", "eval_batch_size", &R::train, &TrainSection::eval_batch_size));
    f.push_back(str("train", "genotype", &R::train, &TrainSection::genotype));

    f.push_back(str("deploy", "model", &R::deploy, &DeploySection::model));
    f.push_back(num("deploy", "bench_batch", &R::deploy, &DeploySection::bench_batch));
    f.push_back(num("deploy", "bench_repeats", &R::deploy, &DeploySection::bench_repeats));
    return f;
  }();
  return table;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Parses the value part of a line, dropping a trailing comment.
Value parse_value(std::string_view raw, const std::string& where) {
  std::string s = trim(raw);
  if (s.empty()) throw ConfigError(where + ": missing value");
  if (s.front() == '"') {
    std::string out;
    std::size_t i = 1;
    for (; i < s.size() && s[i] != '"'; ++i) {
      if (s[i] == '\\') {
        if (++i == s.size()) break;
      }
      out += s[i];
    }
    if (i >= s.size()) throw ConfigError(where + ": unterminated string");
    const std::string rest = trim(std::string_view(s).substr(i + 1));
    if (!rest.empty() && rest.front() != '#') throw ConfigError(where + ": trailing characters after string");
    return {ValueKind::String, out};
  }
  if (const auto hash = s.find('#'); hash != std::string::npos) s = trim(std::string_view(s).substr(0, hash));
  if (s == "true" || s == "false") return {ValueKind::Bool, s};
  return {ValueKind::Number, s};
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text, std::string_view origin) {
  RunConfig cfg;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = std::string(origin) + ":" + std::to_string(lineno);
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (t.front() == '[') {
      const auto close = t.find(']');
      if (close == std::string::npos) throw ConfigError(where + ": unterminated section header");
      section = trim(std::string_view(t).substr(1, close - 1));
      if (section != "data" && section != "search" && section != "train" && section != "deploy") {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string full = section.empty() ? key : section + "." + key;
    const Field* field = nullptr;
    for (const auto& f : fields()) {
      if (section == f.section && key == f.key) field = &f;
    }
    if (!field) throw ConfigError(where + ": unknown key '" + full + "'");
    if (!cfg.explicit_keys.insert(full).second) throw ConfigError(where + ": duplicate key '" + full + "'");
    field->set(cfg, parse_value(std::string_view(t).substr(eq + 1), where), where + " (" + full + ")");
  }
  // A named preset fills in the network shape the text did not spell out;
  // explicit values are left for validate() to compare.
  if (cfg.train.preset != "custom") {
    try {
      const NetworkConfig p = preset(cfg.train.preset);
      if (!cfg.explicit_keys.count("train.num_cells")) cfg.train.num_cells = p.num_cells;
      if (!cfg.explicit_keys.count("train.init_channels")) cfg.train.init_channels = p.init_channels;
    } catch (const std::invalid_argument&) {
      // Unknown preset names are reported by validate().
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

std::string RunConfig::to_toml() const {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      section = f.section;
      out += "\n[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.emit(*this) + "\n";
  }
  return out;
}

void RunConfig::apply_preset(std::string_view name) {
  if (name == "custom") {
    train.preset = "custom";
    return;
  }
  NetworkConfig p;
  try {
    p = preset(name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  train.preset = std::string(name);
  train.num_cells = p.num_cells;
  train.init_channels = p.init_channels;
  explicit_keys.erase("train.num_cells");
  explicit_keys.erase("train.init_channels");
}

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  check(!out.empty(), "out must not be empty");
  check(data.synthetic_train >= 0 && data.synthetic_test >= 0, "data.synthetic_* must be non-negative");
  check(data.synthetic_noise >= 0.0f, "data.synthetic_noise must be non-negative");
  check(data.train_subset >= 0 && data.test_subset >= 0, "data.*_subset must be non-negative");
  check(data.downsample >= 1, "data.downsample must be at least 1");
  check(data.split_fraction > 0.0 && data.split_fraction < 1.0, "data.split_fraction must lie in (0, 1)");
  try {
    search_config().validate();
    (void)SearchSpace::by_name(search.space);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("search: ") + e.what());
  }
  if (train.preset != "custom") {
    NetworkConfig p;
    try {
      p = preset(train.preset);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("train.preset: ") + e.what());
    }
    check(train.num_cells == p.num_cells && train.init_channels == p.init_channels,
          "train.num_cells/init_channels conflict with preset '" + train.preset + "'; use preset = \"custom\"");
  }
  try {
    train_network(kCifarClasses).validate();
    train_scheme().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  check(train.batch_size >= 0, "train.batch_size must be non-negative");
  check(train.max_steps_per_epoch >= 0, "train.max_steps_per_epoch must be non-negative");
  check(train.eval_batch_size >= 1, "train.eval_batch_size must be positive");
  check(deploy.bench_batch >= 1 && deploy.bench_repeats >= 1, "deploy.bench_* must be positive");
}

SearchConfig RunConfig::search_config() const {
  SearchConfig s = search;
  s.seed = seed;
  return s;
}

NetworkConfig RunConfig::train_network(int num_classes) const {
  NetworkConfig n;
  n.name = train.preset;
  n.num_cells = train.num_cells;
  n.init_channels = train.init_channels;
  n.stem_group_conv = train.stem_group_conv;
  n.inter_cell_skip = train.inter_cell_skip;
  n.num_classes = num_classes;
  return n;
}

TrainScheme RunConfig::train_scheme() const {
  SchemeKind kind;
  try {
    kind = scheme_kind_from_string(train.scheme);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train.scheme: ") + e.what());
  }
  TrainScheme s = TrainScheme::make(kind, train.epochs);
  if (train.batch_size > 0) s.batch_size = train.batch_size;
  return s;
}

std::filesystem::path RunConfig::genotype_path() const {
  return train.genotype.empty() ? std::filesystem::path(out) / "genotype.json" : std::filesystem::path(train.genotype);
}

std::filesystem::path RunConfig::model_path() const {
  return deploy.model.empty() ? std::filesystem::path(out) / "model.ckpt" : std::filesystem::path(deploy.model);
}

}  // namespace bnas
