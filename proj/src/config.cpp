#include "csae/config.hpp"

#include "csae/error.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace csae {

using nlohmann::json;

EstimatorSpec parse_spec(std::string_view name) {
  const std::string full(name);
  auto bad = [&](const std::string& why) -> EstimatorSpec {
    throw Error("invalid-spec", "cannot parse estimator '" + full + "': " + why);
  };
  const auto dash = name.find('-');
  if (dash == std::string_view::npos) return bad("expected <strategy>-<family>[...]");
  EstimatorSpec spec;
  spec.strategy = parse_strategy(name.substr(0, dash));
  auto rest = name.substr(dash + 1);
  const auto open = rest.find('[');
  spec.family = parse_family(rest.substr(0, open));
  if (open != std::string_view::npos) {
    if (rest.back() != ']') return bad("unterminated '['");
    std::vector<std::string> slots;
    std::stringstream in(std::string(rest.substr(open + 1, rest.size() - open - 2)));
    for (std::string slot; std::getline(in, slot, ',');) slots.push_back(slot);
    auto set = [](LearnerKind& target, const std::string& slot) {
      if (slot != "-") target = parse_learner(slot);
    };
    if (spec.family == Family::SurveyIPW && slots.size() == 1) {
      set(spec.nuisance.e1, slots[0]);
    } else if (slots.size() == 3) {
      set(spec.nuisance.mu, slots[0]);
      set(spec.nuisance.e1, slots[1]);
      set(spec.nuisance.mu_a, slots[2]);
    } else {
      return bad("expected three learner slots");
    }
  }
  check_spec(spec);
  return spec;
}

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error("invalid-config", what); }

void known_keys(const json& object, const std::string& where, std::initializer_list<const char*> keys) {
  if (!object.is_object()) invalid(where + " must be a JSON object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [key, value] : object.items()) {
    if (!allowed.count(key)) invalid("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& object, const char* key, T& target, const std::string& where) {
  if (!object.contains(key)) return;
  try {
    target = object.at(key).get<T>();
  } catch (const json::exception&) {
    invalid("bad value for '" + std::string(key) + "' in " + where);
  }
}

EstimatorSpec spec_from(const json& entry) {
  if (entry.is_string()) return parse_spec(entry.get<std::string>());
  known_keys(entry, "estimator",
             {"strategy", "family", "mu", "e1", "mu_a", "clip_lo", "clip_hi", "folds", "seed", "allow_erratic",
              "literal_survey_ipw"});
  EstimatorSpec spec;
  std::string text;
  if (entry.contains("strategy")) read(entry, "strategy", text, "estimator"), spec.strategy = parse_strategy(text);
  if (entry.contains("family")) read(entry, "family", text, "estimator"), spec.family = parse_family(text);
  for (auto [key, target] : {std::pair{"mu", &spec.nuisance.mu}, std::pair{"e1", &spec.nuisance.e1},
                             std::pair{"mu_a", &spec.nuisance.mu_a}}) {
    if (entry.contains(key)) read(entry, key, text, "estimator"), *target = parse_learner(text);
  }
  read(entry, "clip_lo", spec.nuisance.clip_lo, "estimator");
  read(entry, "clip_hi", spec.nuisance.clip_hi, "estimator");
  read(entry, "folds", spec.folds, "estimator");
  read(entry, "seed", spec.seed, "estimator");
  read(entry, "allow_erratic", spec.allow_erratic, "estimator");
  read(entry, "literal_survey_ipw", spec.literal_survey_ipw, "estimator");
  check_spec(spec);
  return spec;
}

std::vector<EstimatorSpec> expand_grid(const json& grid) {
  known_keys(grid, "grid", {"strategy", "family", "mu", "e1", "mu_a"});
  auto list = [&](const char* key, const char* fallback) {
    std::vector<std::string> out;
    read(grid, key, out, "grid");
    if (out.empty()) out.push_back(fallback);
    return out;
  };
  std::vector<EstimatorSpec> specs;
  std::set<std::string> seen;
  for (const auto& s : list("strategy", "global")) {
    for (const auto& f : list("family", "AIPW")) {
      for (const auto& mu : list("mu", "H2r")) {
        for (const auto& e1 : list("e1", "Gb")) {
          for (const auto& mu_a : list("mu_a", "M")) {
            auto spec = spec_from(json{{"strategy", s}, {"family", f}, {"mu", mu}, {"e1", e1}, {"mu_a", mu_a}});
            // learners a family ignores collapse onto one name
            if (seen.insert(spec.name()).second) specs.push_back(spec);
          }
        }
      }
    }
  }
  return specs;
}

void read_simulation(const json& object, SimConfig& c, std::optional<std::uint64_t>& seed) {
  const std::string where = "simulation";
  std::string preset = "calibrated";
  read(object, "preset", preset, where);
  c = SimConfig::from_preset(preset);
  known_keys(object, where,
             {"preset", "areas", "area_size", "dimension", "correlation", "covariate_scale", "c0_lo", "c0_hi",
              "c1_lo", "c1_hi", "context_sd", "beta_variance", "beta_shift_mean", "exp_scale", "rescale",
              "common_scale", "linear_index_sd", "exp_index_sd0", "exp_index_sd1", "noise_sd",
              "noise_correlation", "alpha_mean", "alpha_variance", "alpha_last_variance",
              "alpha_context_variance", "alpha_intercept", "alpha_scale", "treated_rate", "segments",
              "guard_redraws", "guard_floor", "seed"});
#define CSAE_READ(field) read(object, #field, c.field, where)
  CSAE_READ(areas); CSAE_READ(area_size); CSAE_READ(dimension); CSAE_READ(correlation);
  CSAE_READ(covariate_scale); CSAE_READ(c0_lo); CSAE_READ(c0_hi); CSAE_READ(c1_lo); CSAE_READ(c1_hi);
  CSAE_READ(context_sd); CSAE_READ(beta_variance); CSAE_READ(beta_shift_mean); CSAE_READ(exp_scale);
  CSAE_READ(rescale); CSAE_READ(common_scale); CSAE_READ(linear_index_sd); CSAE_READ(exp_index_sd0);
  CSAE_READ(exp_index_sd1); CSAE_READ(noise_sd); CSAE_READ(noise_correlation); CSAE_READ(alpha_mean);
  CSAE_READ(alpha_variance); CSAE_READ(alpha_last_variance); CSAE_READ(alpha_context_variance);
  CSAE_READ(alpha_intercept); CSAE_READ(alpha_scale); CSAE_READ(treated_rate); CSAE_READ(guard_redraws);
  CSAE_READ(guard_floor);
#undef CSAE_READ
  if (object.contains("segments")) {
    std::vector<std::tuple<std::size_t, double, double>> raw;
    read(object, "segments", raw, where);
    c.segments.clear();
    for (auto [count, lo, hi] : raw) c.segments.push_back({count, lo, hi});
  }
  if (object.contains("seed")) {
    std::uint64_t s = 0;
    read(object, "seed", s, where);
    seed = s;
  }
}

json simulation_json(const SimConfig& c) {
  json segments = json::array();
  for (const auto& s : c.segments) segments.push_back(json::array({s.count, s.lo, s.hi}));
  return json{{"preset", c.preset}, {"areas", c.areas}, {"area_size", c.area_size}, {"dimension", c.dimension},
              {"correlation", c.correlation}, {"covariate_scale", c.covariate_scale}, {"c0_lo", c.c0_lo},
              {"c0_hi", c.c0_hi}, {"c1_lo", c.c1_lo}, {"c1_hi", c.c1_hi}, {"context_sd", c.context_sd},
              {"beta_variance", c.beta_variance}, {"beta_shift_mean", c.beta_shift_mean},
              {"exp_scale", c.exp_scale}, {"rescale", c.rescale}, {"common_scale", c.common_scale},
              {"linear_index_sd", c.linear_index_sd}, {"exp_index_sd0", c.exp_index_sd0},
              {"exp_index_sd1", c.exp_index_sd1}, {"noise_sd", c.noise_sd},
              {"noise_correlation", c.noise_correlation}, {"alpha_mean", c.alpha_mean},
              {"alpha_variance", c.alpha_variance}, {"alpha_last_variance", c.alpha_last_variance},
              {"alpha_context_variance", c.alpha_context_variance}, {"alpha_intercept", c.alpha_intercept},
              {"alpha_scale", c.alpha_scale}, {"treated_rate", c.treated_rate}, {"segments", segments},
              {"guard_redraws", c.guard_redraws}, {"guard_floor", c.guard_floor}, {"seed", c.seed}};
}

}  // namespace

RunConfig RunConfig::parse(std::string_view text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    invalid(std::string("config is not valid JSON: ") + e.what());
  }
  known_keys(root, "config",
             {"input", "contextual", "interactions", "estimators", "grid", "bootstrap", "replications", "seed",
              "simulation"});
  RunConfig c;
  if (root.contains("input")) {
    std::string path;
    read(root, "input", path, "config");
    c.input = path;
  }
  read(root, "contextual", c.contextual, "config");
  read(root, "interactions", c.interactions, "config");
  read(root, "replications", c.replications, "config");
  read(root, "seed", c.seed, "config");
  if (root.contains("estimators")) {
    if (!root["estimators"].is_array()) invalid("estimators must be a list");
    for (const auto& entry : root["estimators"]) c.estimators.push_back(spec_from(entry));
  }
  if (root.contains("grid")) {
    for (auto& spec : expand_grid(root["grid"])) c.estimators.push_back(spec);
  }
  if (root.contains("bootstrap")) {
    const auto& b = root["bootstrap"];
    known_keys(b, "bootstrap", {"B", "C", "alpha", "scheme", "within_area", "unstable_share"});
    read(b, "B", c.bootstrap.replicates, "bootstrap");
    read(b, "C", c.bootstrap.inner, "bootstrap");
    read(b, "alpha", c.bootstrap.alpha, "bootstrap");
    read(b, "within_area", c.bootstrap.within_area, "bootstrap");
    read(b, "unstable_share", c.bootstrap.unstable_share, "bootstrap");
    std::string scheme = to_string(c.scheme);
    read(b, "scheme", scheme, "bootstrap");
    c.scheme = parse_scheme(scheme);
  }
  if (root.contains("simulation")) read_simulation(root["simulation"], c.simulation, c.population_seed);
  if (c.replications == 0) invalid("replications must be positive");
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot read config '" + path.string() + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

SimConfig RunConfig::population_config() const {
  auto c = simulation;
  c.seed = population_seed.value_or(seed);
  return c;
}

std::vector<EstimatorSpec> RunConfig::specs() const {
  auto out = estimators;
  if (out.empty()) {
    out.push_back(EstimatorSpec{});
    out.push_back(parse_spec("direct-Hajek"));
  }
  for (auto& spec : out) spec.model.interactions = interactions;
  return out;
}

std::string RunConfig::canonical() const {
  json estimators_json = json::array();
  for (const auto& s : specs()) {
    estimators_json.push_back(json{{"name", s.name()}, {"clip_lo", s.nuisance.clip_lo},
                                   {"clip_hi", s.nuisance.clip_hi}, {"folds", s.folds}, {"seed", s.seed},
                                   {"allow_erratic", s.allow_erratic},
                                   {"literal_survey_ipw", s.literal_survey_ipw}});
  }
  const json root{
      {"input", input ? json(input->generic_string()) : json(nullptr)},
      {"contextual", contextual},
      {"interactions", interactions},
      {"estimators", estimators_json},
      {"bootstrap", {{"B", bootstrap.replicates}, {"C", bootstrap.inner}, {"alpha", bootstrap.alpha},
                     {"scheme", to_string(scheme)}, {"within_area", bootstrap.within_area},
                     {"unstable_share", bootstrap.unstable_share}}},
      {"replications", replications},
      {"seed", seed},
      {"simulation", simulation_json(population_config())},
  };
  return root.dump(2);
}

}  // namespace csae
