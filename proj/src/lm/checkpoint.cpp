#include <fstream>
#include <sstream>

#include "ctxedit/lm.hpp"

namespace ctxedit {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json matrix_entry(const std::string& name, const Tensor& t) {
  return json{{"name", name}, {"shape", t.shape()},
              {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

void load_matrices(const json& doc, LMParams& params) {
  for (const auto& entry : doc.at("matrices")) {
    const std::string name = entry.at("name").get<std::string>();
    Tensor& dst = params.matrix(name);
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != dst.shape()) {
      throw ShapeError("checkpoint matrix '" + name + "' has shape " + shape_str(shape) +
                       ", expected " + shape_str(dst.shape()));
    }
    dst = Tensor(shape, entry.at("data").get<std::vector<double>>());
  }
}

}  // namespace

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const json& doc, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump() << '\n';
}

json params_to_json(const LMParams& params) {
  json doc{{"format_version", kCheckpointFormat},
           {"config", params.config},
           {"seed", params.config.seed}};
  json mats = json::array();
  for (const auto& [name, t] : params.named()) mats.push_back(matrix_entry(name, *t));
  doc["matrices"] = std::move(mats);
  return doc;
}

LMParams params_from_json(const json& doc) {
  if (doc.value("format_version", -1) != kCheckpointFormat) {
    throw ConfigError("unsupported checkpoint format_version");
  }
  LMConfig config = doc.at("config").get<LMConfig>();
  config.validate();
  // Shapes come from a fresh init; every matrix is then overwritten.
  LMParams params = init_params(config, doc.value("seed", config.seed));
  load_matrices(doc, params);
  return params;
}

void save_checkpoint(const LMParams& params, const fs::path& path) {
  write_json_file(params_to_json(params), path);
}

void save_delta_checkpoint(const LMParams& params, EditTarget target, const fs::path& base,
                           const fs::path& path) {
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  fs::path rel = base.lexically_relative(dir);
  if (rel.empty() || base.is_absolute() != dir.is_absolute()) rel = base;
  json doc{{"format_version", kCheckpointFormat},
           {"base_checkpoint", rel.generic_string()},
           {"matrices", json::array({matrix_entry(target_name(target),
                                                  snapshot_target(params, target))})}};
  write_json_file(doc, path);
}

LMParams load_checkpoint(const fs::path& path) {
  const json doc = read_json_file(path);
  if (!doc.contains("base_checkpoint")) return params_from_json(doc);
  fs::path base = doc.at("base_checkpoint").get<std::string>();
  if (base.is_relative()) base = path.parent_path() / base;
  LMParams params = load_checkpoint(base);
  load_matrices(doc, params);
  return params;
}

}  // namespace ctxedit
