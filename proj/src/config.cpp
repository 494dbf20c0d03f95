#include "i2b/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "i2b/errors.hpp"
#include "i2b/tasks.hpp"

namespace i2b {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long parse_ll(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size())
    throw usage_error("config: bad integer for '" + key + "': '" + v + "'");
  return x;
}

int parse_int(const std::string& key, const std::string& v) {
  return static_cast<int>(parse_ll(key, v));
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  const long long x = parse_ll(key, v);
  if (x < 0) throw usage_error("config: '" + key + "' must be nonnegative");
  return static_cast<std::uint64_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw usage_error("config: bad number for '" + key + "': '" + v + "'");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw usage_error("config: bad boolean for '" + key + "': '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(parse_int(key, trim(item)));
  return out;
}

InjectionMode parse_injection(const std::string& v) {
  if (v == "none") return InjectionMode::none;
  if (v == "psa") return InjectionMode::psa;
  if (v == "input_fusion") return InjectionMode::input_fusion;
  if (v == "logit_fusion") return InjectionMode::logit_fusion;
  throw usage_error("config: unknown injection '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

struct KeyBinding {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// Alphabetical; config_text writes in this order.
const std::vector<KeyBinding>& bindings() {
  static const std::vector<KeyBinding> table = {
      {"adv_before_prune",
       [](RunConfig& c, const std::string& v) {
         c.train.adv_before_prune = parse_bool("adv_before_prune", v);
       },
       [](const RunConfig& c) {
         return std::string(c.train.adv_before_prune ? "true" : "false");
       }},
      {"alpha_ent",
       [](RunConfig& c, const std::string& v) {
         c.train.alpha_ent = parse_double("alpha_ent", v);
       },
       [](const RunConfig& c) { return fmt_double(c.train.alpha_ent); }},
      {"batch_prompts",
       [](RunConfig& c, const std::string& v) {
         c.train.batch_prompts = parse_int("batch_prompts", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.batch_prompts); }},
      {"beta_ib",
       [](RunConfig& c, const std::string& v) {
         c.train.beta_ib = parse_double("beta_ib", v);
       },
       [](const RunConfig& c) { return fmt_double(c.train.beta_ib); }},
      {"branches_per_rollout",
       [](RunConfig& c, const std::string& v) {
         c.train.K = parse_int("branches_per_rollout", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.K); }},
      {"checkpoint",
       [](RunConfig& c, const std::string& v) { c.checkpoint = v; },
       [](const RunConfig& c) { return c.checkpoint; }},
      {"checkpoint_hash",
       [](RunConfig& c, const std::string& v) { c.checkpoint_hash = v; },
       [](const RunConfig& c) { return c.checkpoint_hash; }},
      {"cvae_lr",
       [](RunConfig& c, const std::string& v) {
         c.train.cvae_lr = parse_double("cvae_lr", v);
       },
       [](const RunConfig& c) { return fmt_double(c.train.cvae_lr); }},
      {"cvae_pairs",
       [](RunConfig& c, const std::string& v) {
         c.train.cvae_pairs = parse_int("cvae_pairs", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.cvae_pairs); }},
      {"cvae_width",
       [](RunConfig& c, const std::string& v) {
         c.cvae_width = parse_int("cvae_width", v);
       },
       [](const RunConfig& c) { return std::to_string(c.cvae_width); }},
      {"d_head",
       [](RunConfig& c, const std::string& v) {
         c.model.d_head = parse_int("d_head", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.d_head); }},
      {"d_model",
       [](RunConfig& c, const std::string& v) {
         c.model.d_model = parse_int("d_model", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.d_model); }},
      {"d_z",
       [](RunConfig& c, const std::string& v) { c.model.d_z = parse_int("d_z", v); },
       [](const RunConfig& c) { return std::to_string(c.model.d_z); }},
      {"data_seed",
       [](RunConfig& c, const std::string& v) {
         c.data_seed = parse_u64("data_seed", v);
       },
       [](const RunConfig& c) { return std::to_string(c.data_seed); }},
      {"decay_horizon",
       [](RunConfig& c, const std::string& v) {
         c.model.decay_horizon = parse_int("decay_horizon", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.decay_horizon); }},
      {"depth_cap",
       [](RunConfig& c, const std::string& v) {
         c.train.depth_cap = parse_int("depth_cap", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.depth_cap); }},
      {"deterministic_timing",
       [](RunConfig& c, const std::string& v) {
         c.deterministic_timing = parse_bool("deterministic_timing", v);
       },
       [](const RunConfig& c) {
         return std::string(c.deterministic_timing ? "true" : "false");
       }},
      {"difficulty_max",
       [](RunConfig& c, const std::string& v) {
         c.difficulty_max = parse_int("difficulty_max", v);
       },
       [](const RunConfig& c) { return std::to_string(c.difficulty_max); }},
      {"difficulty_min",
       [](RunConfig& c, const std::string& v) {
         c.difficulty_min = parse_int("difficulty_min", v);
       },
       [](const RunConfig& c) { return std::to_string(c.difficulty_min); }},
      {"eps_high",
       [](RunConfig& c, const std::string& v) {
         c.train.eps_high = parse_double("eps_high", v);
       },
       [](const RunConfig& c) { return fmt_double(c.train.eps_high); }},
      {"eps_low",
       [](RunConfig& c, const std::string& v) {
         c.train.eps_low = parse_double("eps_low", v);
       },
       [](const RunConfig& c) { return fmt_double(c.train.eps_low); }},
      {"eval_k",
       [](RunConfig& c, const std::string& v) {
         c.eval_k = parse_int_list("eval_k", v);
       },
       [](const RunConfig& c) { return fmt_int_list(c.eval_k); }},
      {"eval_n",
       [](RunConfig& c, const std::string& v) { c.eval_n = parse_int("eval_n", v); },
       [](const RunConfig& c) { return std::to_string(c.eval_n); }},
      {"eval_n_problems",
       [](RunConfig& c, const std::string& v) {
         c.eval_n_problems = parse_int("eval_n_problems", v);
       },
       [](const RunConfig& c) { return std::to_string(c.eval_n_problems); }},
      {"eval_seed",
       [](RunConfig& c, const std::string& v) {
         c.eval_seed = parse_u64("eval_seed", v);
       },
       [](const RunConfig& c) { return std::to_string(c.eval_seed); }},
      {"gamma_ib",
       [](RunConfig& c, const std::string& v) {
         c.train.gamma_ib = parse_double("gamma_ib", v);
       },
       [](const RunConfig& c) { return fmt_double(c.train.gamma_ib); }},
      {"history_window",
       [](RunConfig& c, const std::string& v) {
         c.train.history_window = parse_int("history_window", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.history_window); }},
      {"ib_sum",
       [](RunConfig& c, const std::string& v) {
         c.train.ib_sum = parse_bool("ib_sum", v);
       },
       [](const RunConfig& c) {
         return std::string(c.train.ib_sum ? "true" : "false");
       }},
      {"injection",
       [](RunConfig& c, const std::string& v) {
         c.train.injection = parse_injection(v);
       },
       [](const RunConfig& c) {
         return std::string(injection_mode_name(c.train.injection));
       }},
      {"iterations",
       [](RunConfig& c, const std::string& v) {
         c.train.iterations = parse_int("iterations", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.iterations); }},
      {"lr",
       [](RunConfig& c, const std::string& v) { c.train.lr = parse_double("lr", v); },
       [](const RunConfig& c) { return fmt_double(c.train.lr); }},
      {"max_answer_len",
       [](RunConfig& c, const std::string& v) {
         c.max_answer_len = parse_int("max_answer_len", v);
       },
       [](const RunConfig& c) { return std::to_string(c.max_answer_len); }},
      {"max_new",
       [](RunConfig& c, const std::string& v) {
         c.train.max_new = parse_int("max_new", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.max_new); }},
      {"max_seq_len",
       [](RunConfig& c, const std::string& v) {
         c.model.max_seq_len = parse_int("max_seq_len", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.max_seq_len); }},
      {"mode",
       [](RunConfig& c, const std::string& v) { c.mode = v; },
       [](const RunConfig& c) { return c.mode; }},
      {"momentum",
       [](RunConfig& c, const std::string& v) {
         c.train.momentum = parse_double("momentum", v);
       },
       [](const RunConfig& c) { return fmt_double(c.train.momentum); }},
      {"n_heads",
       [](RunConfig& c, const std::string& v) {
         c.model.n_heads = parse_int("n_heads", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.n_heads); }},
      {"n_layers",
       [](RunConfig& c, const std::string& v) {
         c.model.n_layers = parse_int("n_layers", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.n_layers); }},
      {"n_problems",
       [](RunConfig& c, const std::string& v) {
         c.n_problems = parse_int("n_problems", v);
       },
       [](const RunConfig& c) { return std::to_string(c.n_problems); }},
      {"probe_bootstrap",
       [](RunConfig& c, const std::string& v) {
         c.probe_bootstrap = parse_int("probe_bootstrap", v);
       },
       [](const RunConfig& c) { return std::to_string(c.probe_bootstrap); }},
      {"probe_cohort",
       [](RunConfig& c, const std::string& v) {
         c.probe_cohort = parse_int("probe_cohort", v);
       },
       [](const RunConfig& c) { return std::to_string(c.probe_cohort); }},
      {"probe_easy_max",
       [](RunConfig& c, const std::string& v) {
         c.probe_easy_max = parse_int("probe_easy_max", v);
       },
       [](const RunConfig& c) { return std::to_string(c.probe_easy_max); }},
      {"probe_hard_min",
       [](RunConfig& c, const std::string& v) {
         c.probe_hard_min = parse_int("probe_hard_min", v);
       },
       [](const RunConfig& c) { return std::to_string(c.probe_hard_min); }},
      {"probe_layer",
       [](RunConfig& c, const std::string& v) {
         c.probe_layer = parse_int("probe_layer", v);
       },
       [](const RunConfig& c) { return std::to_string(c.probe_layer); }},
      {"probe_seed",
       [](RunConfig& c, const std::string& v) {
         c.probe_seed = parse_u64("probe_seed", v);
       },
       [](const RunConfig& c) { return std::to_string(c.probe_seed); }},
      {"problems_file",
       [](RunConfig& c, const std::string& v) { c.problems_file = v; },
       [](const RunConfig& c) { return c.problems_file; }},
      {"psa_layers",
       [](RunConfig& c, const std::string& v) {
         c.model.psa_layers = parse_int_list("psa_layers", v);
       },
       [](const RunConfig& c) { return fmt_int_list(c.model.psa_layers); }},
      {"retained_per_prompt",
       [](RunConfig& c, const std::string& v) {
         c.train.N = parse_int("retained_per_prompt", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.N); }},
      {"rollouts_per_prompt",
       [](RunConfig& c, const std::string& v) {
         c.train.M = parse_int("rollouts_per_prompt", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.M); }},
      {"seed",
       [](RunConfig& c, const std::string& v) {
         c.train.seed = parse_u64("seed", v);
       },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      {"temperature",
       [](RunConfig& c, const std::string& v) {
         c.train.temperature = parse_double("temperature", v);
       },
       [](const RunConfig& c) { return fmt_double(c.train.temperature); }},
  };
  return table;
}

const std::set<std::string>& preset_names() {
  static const std::set<std::string> names = {
      "grpo_only",     "entropy_reg",  "i2b",         "i2b_no_ib",
      "i2b_no_branch", "fusion_input", "fusion_logit"};
  return names;
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate();
  } catch (const error& e) {
    throw usage_error(std::string("config: ") + e.what());
  }
  if (model.vocab_size != tok::kVocab)
    throw usage_error("config: vocab size is fixed by the tokenizer");
  if (difficulty_min < 1 || difficulty_max > 9 || difficulty_min > difficulty_max)
    throw usage_error("config: difficulty range must sit inside [1, 9]");
  if (cvae_width < 1) throw usage_error("config: cvae_width must be positive");
  if (n_problems < 1) throw usage_error("config: n_problems must be positive");
  if (max_answer_len < 0)
    throw usage_error("config: max_answer_len must be nonnegative");
  if (eval_n < 1) throw usage_error("config: eval_n must be positive");
  if (eval_k.empty()) throw usage_error("config: eval_k must not be empty");
  for (int k : eval_k)
    if (k < 1 || k > eval_n)
      throw usage_error("config: every eval_k must sit in [1, eval_n]");
  if (eval_n_problems < 1)
    throw usage_error("config: eval_n_problems must be positive");
  if (probe_bootstrap < 2)
    throw usage_error("config: probe_bootstrap needs at least two draws");
  if (probe_cohort < 1) throw usage_error("config: probe_cohort must be positive");
  if (probe_easy_max < 1 || probe_hard_min > 9 || probe_easy_max >= probe_hard_min)
    throw usage_error("config: probe cohorts must satisfy easy_max < hard_min in [1, 9]");
  if (probe_layer < -1 || probe_layer >= model.n_layers)
    throw usage_error("config: probe_layer out of range");
  if (preset_names().count(mode) == 0)
    throw usage_error("config: unknown mode '" + mode + "'");
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw usage_error("config: line " + std::to_string(line_no) +
                        " is not 'key = value'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (!seen.insert(key).second)
      throw usage_error("config: duplicate key '" + key + "'");
    bool matched = false;
    for (const auto& b : bindings())
      if (key == b.key) {
        b.set(cfg, value);
        matched = true;
        break;
      }
    if (!matched) throw usage_error("config: unknown key '" + key + "'");
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw usage_error("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& b : bindings()) {
    out += b.key;
    out += " = ";
    out += b.get(cfg);
    out += "\n";
  }
  return out;
}

void apply_mode_preset(RunConfig& cfg, const std::string& mode) {
  TrainConfig& t = cfg.train;
  if (mode == "grpo_only") {
    t.mode = BaselineMode::grpo_only;
    t.K = 0;
    t.gamma_ib = 0.0;
    t.alpha_ent = 0.0;
    t.N = std::min(t.N, t.M);
  } else if (mode == "entropy_reg") {
    t.mode = BaselineMode::entropy_reg;
    t.K = 0;
    t.gamma_ib = 0.0;
    if (t.alpha_ent == 0.0) t.alpha_ent = 0.01;
    t.N = std::min(t.N, t.M);
  } else if (mode == "i2b") {
    t.mode = BaselineMode::i2b;
  } else if (mode == "i2b_no_ib") {
    t.mode = BaselineMode::i2b;
    t.gamma_ib = 0.0;
    t.N = t.M * (t.K + 1);
  } else if (mode == "i2b_no_branch") {
    t.mode = BaselineMode::i2b;
    t.K = 0;
    t.N = std::min(t.N, t.M);
  } else if (mode == "fusion_input") {
    t.mode = BaselineMode::i2b;
    t.injection = InjectionMode::input_fusion;
  } else if (mode == "fusion_logit") {
    t.mode = BaselineMode::i2b;
    t.injection = InjectionMode::logit_fusion;
  } else {
    throw usage_error("config: unknown mode '" + mode + "'");
  }
  cfg.mode = mode;
}

}  // namespace i2b
