#include "deqfuse/checkpoint.hpp"

#include <fstream>

#include <json.hpp>

namespace deqfuse {

namespace {

using nlohmann::json;

json tensor_to_json(const Tensor2& t) {
  json arr = json::array();
  for (std::size_t k = 0; k < t.size(); ++k) arr.push_back(t[k]);
  return json{{"rows", t.rows()}, {"cols", t.cols()}, {"data", std::move(arr)}};
}

Tensor2 tensor_from_json(const json& j) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  const auto& data = j.at("data");
  if (data.size() != rows * cols) throw IoError("checkpoint: tensor data length mismatch");
  Tensor2 t(rows, cols);
  for (std::size_t k = 0; k < t.size(); ++k) t[k] = data[k].get<double>();
  return t;
}

}  // namespace

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  json j;
  j["format_version"] = ckpt.format_version;
  j["seed"] = ckpt.seed;
  j["width"] = ckpt.params.width;
  j["n_modalities"] = ckpt.params.n_modalities;
  j["groups"] = ckpt.params.groups;
  j["eps"] = ckpt.params.eps;
  j["gate_mode"] = gate_mode_name(ckpt.params.gate_mode);
  json params = json::object();
  visit_params(ckpt.params, [&params](const std::string& name, const Tensor2& t) {
    params[name] = tensor_to_json(t);
  });
  j["params"] = std::move(params);
  if (ckpt.has_head) {
    j["head"] = {{"weight", tensor_to_json(ckpt.head.weight)},
                 {"bias", tensor_to_json(ckpt.head.bias)}};
  }
  return j.dump(2) + "\n";
}

Checkpoint checkpoint_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("checkpoint: invalid JSON: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.format_version = j.at("format_version").get<int>();
  if (ckpt.format_version != 1) {
    throw IoError("checkpoint: unsupported format_version " +
                  std::to_string(ckpt.format_version));
  }
  ckpt.seed = j.at("seed").get<std::uint64_t>();
  FusionParams& p = ckpt.params;
  p.width = j.at("width").get<std::size_t>();
  p.n_modalities = j.at("n_modalities").get<std::size_t>();
  p.groups = j.at("groups").get<std::size_t>();
  p.eps = j.at("eps").get<double>();
  p.gate_mode = gate_mode_from_name(j.at("gate_mode").get<std::string>());
  p.blocks.resize(p.n_modalities);
  const json& params = j.at("params");
  std::size_t seen = 0;
  visit_params(p, [&params, &seen](const std::string& name, Tensor2& t) {
    if (!params.contains(name)) throw IoError("checkpoint: missing parameter " + name);
    t = tensor_from_json(params.at(name));
    ++seen;
  });
  if (params.size() != seen) throw IoError("checkpoint: unexpected extra parameters");
  p.validate();
  if (j.contains("head")) {
    ckpt.has_head = true;
    ckpt.head.weight = tensor_from_json(j.at("head").at("weight"));
    ckpt.head.bias = tensor_from_json(j.at("head").at("bias"));
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << checkpoint_to_json(ckpt);
  if (!out) throw IoError("failed writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_json(text);
}

}  // namespace deqfuse
