#include "changeseg/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "changeseg/error.hpp"
#include "changeseg/io_util.hpp"

namespace changeseg {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

constexpr const char* kFormat = "changeseg-checkpoint";
constexpr int kVersion = 1;

void append_floats(std::string& blob, const std::vector<float>& values) {
  const std::size_t at = blob.size();
  blob.resize(at + values.size() * sizeof(float));
  char* dst = blob.data() + at;
  for (float f : values) {
    auto bits = std::bit_cast<std::uint32_t>(f);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(dst, &bits, sizeof bits);
    dst += sizeof bits;
  }
}

std::vector<float> read_floats(const std::string& blob, std::size_t offset, std::size_t count) {
  std::vector<float> out(count);
  const char* src = blob.data() + offset;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, src + i * sizeof bits, sizeof bits);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

ojson normalization_to_json(const NormalizationStats& n) {
  ojson j;
  j["mode"] = to_string(n.mode);
  j["offset"] = n.offset;
  j["scale"] = n.scale;
  j["constant"] = n.constant;
  return j;
}

NormalizationStats normalization_from_json(const json& j) {
  NormalizationStats n;
  n.mode = parse_normalize_mode(j.at("mode").get<std::string>());
  n.offset = j.at("offset").get<std::vector<double>>();
  n.scale = j.at("scale").get<std::vector<double>>();
  n.constant = j.value("constant", std::vector<bool>(n.offset.size(), false));
  if (n.scale.size() != n.offset.size() || n.constant.size() != n.offset.size()) {
    throw FormatError("normalization arrays differ in length");
  }
  return n;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& manifest_path) {
  const auto layout = param_layout(ckpt.config);
  if (layout.size() != ckpt.params.tensors.size()) {
    throw ShapeError("checkpoint parameters do not match the model config");
  }
  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");

  std::string blob;
  ojson index = ojson::array();
  auto add_group = [&](const ViTParams<float>& p, const char* group) {
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      const auto& t = p.tensors[i];
      if (t.name != layout[i].name || t.numel() != layout[i].numel()) {
        throw ShapeError("checkpoint tensor '" + t.name + "' does not match the layout");
      }
      ojson e;
      e["name"] = t.name;
      e["shape"] = t.shape;
      e["group"] = group;
      e["offset"] = blob.size();
      e["count"] = t.numel();
      index.push_back(e);
      append_floats(blob, t.values);
    }
  };
  add_group(ckpt.params, "params");

  ojson m;
  m["format"] = kFormat;
  m["version"] = kVersion;
  m["config"] = ojson::parse(to_json(ckpt.config).dump());
  m["tile_size"] = ckpt.tile_size;
  m["parameter_count"] = ckpt.params.parameter_count();
  m["blob"] = blob_path.filename().string();
  if (ckpt.normalization) m["normalization"] = normalization_to_json(*ckpt.normalization);
  if (ckpt.train_config) m["train_config"] = ojson::parse(to_json(*ckpt.train_config).dump());
  if (ckpt.train_state) {
    const TrainState& s = *ckpt.train_state;
    add_group(s.adam.m, "adam_m");
    add_group(s.adam.v, "adam_v");
    ojson ts;
    ts["adam_step"] = s.adam.step;
    ts["next_epoch"] = s.next_epoch;
    ts["stage"] = s.stage;
    ts["finished"] = s.finished;
    ojson epochs = ojson::array();
    for (const auto& e : s.history.epochs) {
      ojson je;
      je["epoch"] = e.epoch;
      je["train_loss"] = e.train_loss;
      je["val_loss"] = e.val_loss;
      je["stage"] = e.stage;
      je["wall_time"] = e.wall_time;
      epochs.push_back(je);
    }
    ts["history"] = epochs;
    ts["stage_switch_epoch"] = s.history.stage_switch_epoch ? ojson(*s.history.stage_switch_epoch) : ojson(nullptr);
    m["train_state"] = ts;
  }
  m["tensors"] = index;
  m["blob_bytes"] = blob.size();

  // Blob first: a manifest on disk always refers to a complete blob.
  write_file_atomic(blob_path, blob);
  write_file_atomic(manifest_path, m.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  try {
    if (m.value("format", std::string()) != kFormat) {
      throw FormatError("checkpoint " + manifest_path.string() + " has an unknown format tag");
    }
    if (m.at("version").get<int>() != kVersion) {
      throw FormatError("unsupported checkpoint version " + m.at("version").dump());
    }
    Checkpoint ck;
    ck.config = vit_config_from_json(m.at("config"));
    ck.config.validate();
    ck.tile_size = m.value("tile_size", ck.config.input_h);
    const auto blob_path = manifest_path.parent_path() / m.at("blob").get<std::string>();
    const std::string blob = read_file(blob_path);
    if (m.contains("blob_bytes") && m["blob_bytes"].get<std::size_t>() != blob.size()) {
      throw FormatError("checkpoint blob " + blob_path.string() + " has " + std::to_string(blob.size()) +
                        " bytes, manifest says " + m["blob_bytes"].dump());
    }

    const auto layout = param_layout(ck.config);
    auto read_group = [&](const std::string& group) {
      ViTParams<float> p;
      for (const auto& e : m.at("tensors")) {
        if (e.at("group").get<std::string>() != group) continue;
        const std::size_t i = p.tensors.size();
        if (i >= layout.size()) throw FormatError("checkpoint has extra tensors in group " + group);
        const auto name = e.at("name").get<std::string>();
        const auto shape = e.at("shape").get<std::vector<int>>();
        const auto offset = e.at("offset").get<std::size_t>();
        const auto count = e.at("count").get<std::size_t>();
        if (name != layout[i].name || shape != layout[i].shape || count != layout[i].numel()) {
          throw FormatError("checkpoint tensor '" + name + "' does not match the config layout");
        }
        if (offset % sizeof(float) != 0 || offset + count * sizeof(float) > blob.size()) {
          throw FormatError("checkpoint tensor '" + name + "' lies outside the blob");
        }
        p.tensors.push_back({name, shape, read_floats(blob, offset, count)});
      }
      if (p.tensors.size() != layout.size()) {
        throw FormatError("checkpoint group '" + group + "' has " + std::to_string(p.tensors.size()) +
                          " tensors, expected " + std::to_string(layout.size()));
      }
      return p;
    };
    ck.params = read_group("params");
    if (m.contains("normalization")) ck.normalization = normalization_from_json(m["normalization"]);
    if (m.contains("train_config")) ck.train_config = train_config_from_json(m["train_config"]);
    if (m.contains("train_state")) {
      const json& ts = m["train_state"];
      TrainState s;
      s.params = ck.params;
      s.adam.m = read_group("adam_m");
      s.adam.v = read_group("adam_v");
      s.adam.step = ts.at("adam_step").get<std::int64_t>();
      s.next_epoch = ts.at("next_epoch").get<int>();
      s.stage = ts.at("stage").get<int>();
      s.finished = ts.at("finished").get<bool>();
      for (const auto& e : ts.at("history")) s.history.epochs.push_back(epoch_record_from_json(e));
      if (ts.contains("stage_switch_epoch") && !ts["stage_switch_epoch"].is_null()) {
        s.history.stage_switch_epoch = ts["stage_switch_epoch"].get<int>();
      }
      ck.train_state = std::move(s);
    }
    return ck;
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint " + manifest_path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError("checkpoint " + manifest_path.string() + " has an invalid config: " + e.what());
  }
}

}  // namespace changeseg
