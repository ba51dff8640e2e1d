#include "utrack/checkpoint.hpp"

#include <bit>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "utrack/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

namespace utrack {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void save_checkpoint(const std::string& dir, TransformerParams& actor,
                     TransformerParams& critic, const CheckpointMeta& meta,
                     const std::vector<double>* train_state) {
  fs::create_directories(dir);

  json manifest;
  manifest["format"] = "utrack-checkpoint";
  manifest["version"] = meta.version;
  manifest["net"] = {{"z", meta.net.z},
                     {"d", meta.net.d},
                     {"heads", meta.net.heads},
                     {"blocks", meta.net.blocks}};
  manifest["actor_out_dim"] = meta.actor_out_dim;
  manifest["training_step"] = meta.training_step;
  manifest["update_index"] = meta.update_index;
  manifest["blob"] = "params.bin";
  manifest["dtype"] = "f32le";

  std::vector<float> blob;
  json tensors = json::array();
  for (auto& [prefix, params] :
       {std::pair<const char*, TransformerParams*>{"actor/", &actor},
        {"critic/", &critic}}) {
    for (auto& [name, t] : params->tensor_refs()) {
      json entry;
      entry["name"] = prefix + name;
      entry["rows"] = t->rows();
      entry["cols"] = t->cols();
      entry["offset"] = blob.size();
      tensors.push_back(entry);
      for (Eigen::Index i = 0; i < t->size(); ++i) {
        const float v = static_cast<float>(t->data()[i]);
        blob.push_back(v);
        t->data()[i] = static_cast<double>(v);  // round-to-stored-precision
      }
    }
  }
  manifest["tensors"] = tensors;
  manifest["train_state_doubles"] =
      train_state ? static_cast<std::int64_t>(train_state->size()) : 0;

  {
    std::ofstream out(fs::path(dir) / "manifest.json");
    out << manifest.dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "params.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size() * sizeof(float)));
  }
  if (train_state) {
    std::ofstream out(fs::path(dir) / "train_state.bin", std::ios::binary);
    out.write(reinterpret_cast<const char*>(train_state->data()),
              static_cast<std::streamsize>(train_state->size() * sizeof(double)));
  }
}

LoadedCheckpoint load_checkpoint(const std::string& dir,
                                 const std::optional<NetConfig>& expected) {
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  if (!fs::exists(manifest_path))
    throw DataError("no checkpoint manifest at " + manifest_path.string());

  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw DataError("bad checkpoint manifest " + manifest_path.string() + ": " +
                    e.what());
  }
  if (manifest.value("format", "") != "utrack-checkpoint")
    throw DataError(manifest_path.string() + ": not a utrack checkpoint");

  LoadedCheckpoint ck;
  ck.meta.version = manifest.at("version").get<int>();
  ck.meta.net.z = manifest.at("net").at("z").get<int>();
  ck.meta.net.d = manifest.at("net").at("d").get<int>();
  ck.meta.net.heads = manifest.at("net").at("heads").get<int>();
  ck.meta.net.blocks = manifest.at("net").at("blocks").get<int>();
  ck.meta.actor_out_dim = manifest.at("actor_out_dim").get<int>();
  ck.meta.training_step = manifest.at("training_step").get<long long>();
  ck.meta.update_index = manifest.at("update_index").get<long long>();

  if (expected && (expected->z != ck.meta.net.z || expected->d != ck.meta.net.d ||
                   expected->heads != ck.meta.net.heads ||
                   expected->blocks != ck.meta.net.blocks)) {
    throw DataError("checkpoint " + dir + " has net dims (z=" +
                    std::to_string(ck.meta.net.z) + ",d=" + std::to_string(ck.meta.net.d) +
                    ",h=" + std::to_string(ck.meta.net.heads) + ",blocks=" +
                    std::to_string(ck.meta.net.blocks) + ") incompatible with config");
  }

  const std::string blob_bytes = read_file(fs::path(dir) / manifest.at("blob").get<std::string>());
  const std::size_t n_floats = blob_bytes.size() / sizeof(float);
  const float* blob = reinterpret_cast<const float*>(blob_bytes.data());

  ck.actor = init_params(ck.meta.net, ck.meta.actor_out_dim, true, 0);
  ck.critic = init_params(ck.meta.net, 1, false, 0);

  auto fill = [&](const std::string& prefix, TransformerParams& params) {
    auto refs = params.tensor_refs();
    for (auto& [name, t] : refs) {
      const std::string full = prefix + name;
      bool found = false;
      for (const json& entry : manifest.at("tensors")) {
        if (entry.at("name").get<std::string>() != full) continue;
        found = true;
        if (entry.at("rows").get<Eigen::Index>() != t->rows() ||
            entry.at("cols").get<Eigen::Index>() != t->cols())
          throw DataError("checkpoint tensor " + full + " has unexpected shape");
        const auto off = entry.at("offset").get<std::size_t>();
        if (off + static_cast<std::size_t>(t->size()) > n_floats)
          throw DataError("checkpoint blob too short for tensor " + full);
        for (Eigen::Index i = 0; i < t->size(); ++i)
          t->data()[i] = static_cast<double>(blob[off + static_cast<std::size_t>(i)]);
        break;
      }
      if (!found) throw DataError("checkpoint missing tensor " + full);
    }
  };
  fill("actor/", ck.actor);
  fill("critic/", ck.critic);

  const auto n_state = manifest.value("train_state_doubles", std::int64_t{0});
  if (n_state > 0) {
    const fs::path sidecar = fs::path(dir) / "train_state.bin";
    if (fs::exists(sidecar)) {
      const std::string bytes = read_file(sidecar);
      if (bytes.size() != static_cast<std::size_t>(n_state) * sizeof(double))
        throw DataError("train_state.bin size mismatch in " + dir);
      ck.train_state.resize(static_cast<std::size_t>(n_state));
      std::memcpy(ck.train_state.data(), bytes.data(), bytes.size());
    }
  }
  return ck;
}

std::uint64_t checkpoint_hash(const std::string& dir) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const std::string& bytes) {
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  };
  mix(read_file(fs::path(dir) / "manifest.json"));
  mix(read_file(fs::path(dir) / "params.bin"));
  return h;
}

}  // namespace utrack
