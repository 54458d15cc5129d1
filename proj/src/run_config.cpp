#include "epc/run_config.hpp"

#include <fstream>
#include <stdexcept>

#include "detail/parse.hpp"

namespace epc {

TrainOptions ResolvedConfig::train_options() const {
  TrainOptions o;
  o.epochs = train.epochs;
  o.seed = train.seed;
  o.batch_tuples = train.batch_tuples;
  o.mining = mining;
  o.loss = loss;
  o.adam = optim;
  return o;
}

void ResolvedConfig::apply(const std::string& key, const std::string& value) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw std::invalid_argument("unknown configuration key '" + key + "'");
  const std::string section = key.substr(0, dot);
  const std::string name = key.substr(dot + 1);
  if (section == "model") {
    model.set(name, value);
  } else if (section == "loss") {
    loss.set(name, value);
  } else if (section == "synth") {
    synth.set(name, value);
  } else if (section == "optim") {
    if (name == "learning_rate" || name == "lr") optim.learning_rate = detail::parse_double(key, value);
    else if (name == "beta1") optim.beta1 = detail::parse_double(key, value);
    else if (name == "beta2") optim.beta2 = detail::parse_double(key, value);
    else if (name == "epsilon") optim.epsilon = detail::parse_double(key, value);
    else throw std::invalid_argument("unknown configuration key '" + key + "'");
  } else if (section == "train") {
    if (name == "epochs") train.epochs = detail::parse_size(key, value);
    else if (name == "seed") train.seed = detail::parse_u64(key, value);
    else if (name == "batch_tuples") train.batch_tuples = detail::parse_size(key, value);
    else if (name == "positives") mining.positives = detail::parse_size(key, value);
    else if (name == "negatives") mining.negatives = detail::parse_size(key, value);
    else if (name == "positive_radius") mining.positive_radius = detail::parse_double(key, value);
    else if (name == "negative_radius") mining.negative_radius = detail::parse_double(key, value);
    else throw std::invalid_argument("unknown configuration key '" + key + "'");
  } else if (section == "eval") {
    if (name == "radius") eval.radius = detail::parse_double(key, value);
    else if (name == "max_k") eval.max_k = detail::parse_size(key, value);
    else throw std::invalid_argument("unknown configuration key '" + key + "'");
  } else {
    throw std::invalid_argument("unknown configuration key '" + key + "'");
  }
}

std::vector<std::pair<std::string, std::string>> ResolvedConfig::entries() const {
  using detail::format_double;
  std::vector<std::pair<std::string, std::string>> out;
  auto add = [&](const std::string& prefix, const auto& list) {
    for (const auto& [k, v] : list) out.emplace_back(prefix + "." + k, v);
  };
  add("model", model.entries());
  add("loss", loss.entries());
  out.emplace_back("optim.learning_rate", format_double(optim.learning_rate));
  out.emplace_back("optim.beta1", format_double(optim.beta1));
  out.emplace_back("optim.beta2", format_double(optim.beta2));
  out.emplace_back("optim.epsilon", format_double(optim.epsilon));
  add("synth", synth.entries());
  out.emplace_back("train.epochs", std::to_string(train.epochs));
  out.emplace_back("train.seed", std::to_string(train.seed));
  out.emplace_back("train.batch_tuples", std::to_string(train.batch_tuples));
  out.emplace_back("train.positives", std::to_string(mining.positives));
  out.emplace_back("train.negatives", std::to_string(mining.negatives));
  out.emplace_back("train.positive_radius", format_double(mining.positive_radius));
  out.emplace_back("train.negative_radius", format_double(mining.negative_radius));
  out.emplace_back("eval.radius", format_double(eval.radius));
  out.emplace_back("eval.max_k", std::to_string(eval.max_k));
  return out;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    try {
      set(line.substr(first));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void RunConfig::set(const std::string& key, const std::string& value) {
  ResolvedConfig scratch;
  scratch.apply(key, value);  // rejects unknown keys and bad values early
  assignments_.emplace_back(key, value);
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("expected key=value, got '" + assignment + "'");
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

ResolvedConfig RunConfig::resolve(ResolvedConfig base) const {
  for (const auto& [k, v] : assignments_) base.apply(k, v);
  return base;
}

}  // namespace epc
