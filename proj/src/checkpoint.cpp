#include "hgbev/harness.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hgbev {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using nlohmann::json;

namespace {

constexpr const char* kMagic = "HGBEV-CHECKPOINT 1";
constexpr const char* kShapeSections[] = {"grid", "encoder", "ablation", "head"};

void put_le(std::string& out, std::uint64_t bits, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::string describe(const json& j) { return j.dump(); }

}  // namespace

CheckpointMismatch::CheckpointMismatch(std::vector<std::string> fields)
    : std::runtime_error([&] {
        std::string s = "checkpoint is incompatible with the configuration; differing fields:";
        for (const std::string& f : fields) s += "\n  " + f;
        return s;
      }()),
      fields_(std::move(fields)) {}

void save_checkpoint(const fs::path& path, const TrainState& state, const RunConfig& cfg) {
  const bool f64 = cfg.checkpoint_dtype == "f64";
  std::string data;
  ojson index = ojson::array();
  for (const auto& [name, p] : state.params.all()) {
    const std::pair<const char*, const Tensor*> roles[] = {{"value", &p.value}, {"adam_m", &p.adam_m}, {"adam_v", &p.adam_v}};
    for (const auto& [role, t] : roles) {
      index.push_back({{"name", name}, {"role", role}, {"shape", t->shape}, {"offset", data.size()}});
      for (double v : t->data) {
        if (f64) put_le(data, std::bit_cast<std::uint64_t>(v), 8);
        else put_le(data, std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4);
      }
    }
  }
  ojson header{{"config", config_to_json(cfg)},
               {"step", state.step},
               {"seed", cfg.seed},
               {"dtype", f64 ? "f64" : "f32"},
               {"byte_order", "little"},
               {"data_bytes", data.size()},
               {"tensors", index}};
  const std::string text = header.dump();
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
    f << kMagic << "\n" << text.size() << "\n" << text << "\n";
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

TrainState load_checkpoint(const fs::path& path, const RunConfig& cfg) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string magic = std::string(kMagic) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0)
    throw std::runtime_error(path.string() + ": not a checkpoint file");
  size_t pos = magic.size();
  const size_t nl = bytes.find('\n', pos);
  if (nl == std::string::npos) throw std::runtime_error(path.string() + ": truncated header");
  const size_t header_len = std::stoul(bytes.substr(pos, nl - pos));
  pos = nl + 1;
  if (bytes.size() < pos + header_len + 1) throw std::runtime_error(path.string() + ": truncated header");
  const json header = json::parse(bytes.substr(pos, header_len));
  const size_t data_start = pos + header_len + 1;

  const ojson want = config_to_json(cfg);
  std::vector<std::string> diffs;
  for (const char* section : kShapeSections) {
    const json& have = header.at("config").at(section);
    const json mine = json::parse(want.at(section).dump());
    for (auto it = mine.begin(); it != mine.end(); ++it) {
      const std::string field = std::string(section) + "." + it.key();
      if (!have.contains(it.key())) diffs.push_back(field + ": missing in checkpoint");
      else if (have.at(it.key()) != it.value())
        diffs.push_back(field + ": checkpoint " + describe(have.at(it.key())) + ", config " + describe(it.value()));
    }
  }
  if (!diffs.empty()) throw CheckpointMismatch(diffs);

  TrainState state;
  state.params = init_model(cfg);
  state.step = header.at("step").get<int>();
  const bool f64 = header.at("dtype").get<std::string>() == "f64";
  const int width = f64 ? 8 : 4;
  const size_t data_bytes = header.at("data_bytes").get<size_t>();
  if (bytes.size() < data_start + data_bytes) throw std::runtime_error(path.string() + ": truncated tensor data");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data()) + data_start;
  size_t seen = 0;
  for (const json& t : header.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    const std::string role = t.at("role").get<std::string>();
    if (!state.params.contains(name))
      throw CheckpointMismatch({"tensor " + name + ": not present in the configured model"});
    Parameter& p = state.params.at(name);
    Tensor& dst = role == "value" ? p.value : role == "adam_m" ? p.adam_m : p.adam_v;
    if (t.at("shape").get<Shape>() != dst.shape)
      throw CheckpointMismatch({"tensor " + name + ": shape " + t.at("shape").dump() + " vs " + shape_str(dst.shape)});
    const size_t off = t.at("offset").get<size_t>();
    if (off + static_cast<size_t>(dst.numel()) * static_cast<size_t>(width) > data_bytes)
      throw std::runtime_error(path.string() + ": tensor " + name + " exceeds the data block");
    for (std::int64_t i = 0; i < dst.numel(); ++i) {
      const unsigned char* q = raw + off + static_cast<size_t>(i) * static_cast<size_t>(width);
      dst[i] = f64 ? std::bit_cast<double>(get_le(q, 8))
                   : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(get_le(q, 4))));
    }
    if (role == "value") ++seen;
  }
  if (seen != state.params.all().size())
    throw CheckpointMismatch({"checkpoint holds " + std::to_string(seen) + " parameters, model has " +
                              std::to_string(state.params.all().size())});
  return state;
}

}  // namespace hgbev
