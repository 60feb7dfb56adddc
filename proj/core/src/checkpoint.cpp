#include "vndiff/checkpoint.hpp"

#include <algorithm>
#include <cstring>

#include "vndiff/binary_io.hpp"
#include "vndiff/digest.hpp"
#include "vndiff/error.hpp"

namespace vndiff {

std::vector<std::byte> encode_container(nlohmann::json manifest, const std::vector<NamedTensor>& tensors) {
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (t.data.size() != t.shape.numel()) throw ShapeError("checkpoint tensor " + t.name + " has inconsistent size");
    table.push_back({{"name", t.name}, {"shape", t.shape.dims()}, {"offset", offset}});
    offset += t.data.size() * sizeof(float);
  }
  manifest["tensors"] = std::move(table);
  const std::string text = manifest.dump();

  std::vector<std::byte> out;
  out.reserve(16 + text.size() + offset);
  for (char c : kCheckpointMagic) out.push_back(static_cast<std::byte>(c));
  io::put_le<std::uint64_t>(out, text.size());
  const auto* tb = reinterpret_cast<const std::byte*>(text.data());
  out.insert(out.end(), tb, tb + text.size());
  for (const auto& t : tensors) io::put_floats_le(out, t.data);
  return out;
}

Container decode_container(std::span<const std::byte> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw BadMagicError("checkpoint: bad magic");
  }
  if (bytes.size() < 16) throw TruncatedError("checkpoint: truncated before manifest length");
  const auto len = io::get_le<std::uint64_t>(bytes.data() + 8);
  if (bytes.size() - 16 < len) throw TruncatedError("checkpoint: truncated manifest");
  Container c;
  try {
    c.manifest = nlohmann::json::parse(reinterpret_cast<const char*>(bytes.data() + 16),
                                       reinterpret_cast<const char*>(bytes.data() + 16 + len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  const std::byte* blobs = bytes.data() + 16 + len;
  const std::size_t blob_bytes = bytes.size() - 16 - len;
  for (const auto& entry : c.manifest.at("tensors")) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = Shape(entry.at("shape").get<std::vector<int>>());
    const auto off = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = t.shape.numel();
    if (off > blob_bytes || blob_bytes - off < n * sizeof(float)) {
      throw TruncatedError("checkpoint: tensor " + t.name + " extends past end of file");
    }
    t.data.resize(n);
    io::get_floats_le(blobs + off, t.data);
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void write_container(const std::filesystem::path& path, nlohmann::json manifest,
                     const std::vector<NamedTensor>& tensors) {
  io::write_file_atomic(path, encode_container(std::move(manifest), tensors));
}

Container read_container(const std::filesystem::path& path) {
  return decode_container(io::read_file(path));
}

std::string parameter_digest(const UNet& net) {
  Sha256 h;
  net.for_each_parameter([&h](const std::string& name, const Parameter<float>& p) {
    std::vector<std::byte> buf;
    for (int d : p.value.shape().dims()) io::put_le<std::int32_t>(buf, d);
    io::put_floats_le(buf, p.value.values());
    h.update(name).update(buf);
  });
  return h.hex();
}

std::vector<NamedTensor> optimizer_tensors(const Adam::State& s) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : s.first) out.push_back({"optim.m." + name, t.shape(), {t.values().begin(), t.values().end()}});
  for (const auto& [name, t] : s.second) out.push_back({"optim.v." + name, t.shape(), {t.values().begin(), t.values().end()}});
  return out;
}

Adam::State optimizer_from(const Container& c) {
  Adam::State s;
  s.steps = c.manifest.value("optimizer_steps", std::int64_t{0});
  for (const auto& t : c.tensors) {
    if (t.name.rfind("optim.m.", 0) == 0) s.first.emplace(t.name.substr(8), Tensor<float>(t.shape, t.data));
    if (t.name.rfind("optim.v.", 0) == 0) s.second.emplace(t.name.substr(8), Tensor<float>(t.shape, t.data));
  }
  return s;
}

void save_checkpoint(const UNet& net, const std::filesystem::path& path, const TrainingState* state,
                     const nlohmann::json& extra) {
  nlohmann::json manifest;
  manifest["format"] = "VNCKPT1";
  manifest["kind"] = "score_net";
  manifest["config"] = net.config();
  manifest["digest"] = parameter_digest(net);
  if (!extra.is_null()) manifest["extra"] = extra;
  std::vector<NamedTensor> tensors;
  net.for_each_parameter([&tensors](const std::string& name, const Parameter<float>& p) {
    tensors.push_back({name, p.value.shape(), {p.value.values().begin(), p.value.values().end()}});
  });
  if (state) {
    manifest["step"] = state->step;
    manifest["optimizer_steps"] = state->optimizer.steps;
    auto opt = optimizer_tensors(state->optimizer);
    tensors.insert(tensors.end(), std::make_move_iterator(opt.begin()), std::make_move_iterator(opt.end()));
  }
  write_container(path, std::move(manifest), tensors);
}

UNet load_checkpoint(const std::filesystem::path& path, TrainingState* state, nlohmann::json* extra) {
  Container c = read_container(path);
  if (c.manifest.value("kind", std::string()) != "score_net") {
    throw FormatError("checkpoint " + path.string() + " does not hold a score network");
  }
  UNet net(c.manifest.at("config").get<UNetConfig>(), 0);
  std::size_t i = 0;
  net.visit_parameters([&](const std::string& name, Parameter<float>& p) {
    if (i >= c.tensors.size() || c.tensors[i].name != name) {
      throw TensorNameMismatchError("checkpoint: expected tensor '" + name + "', found '" +
                                    (i < c.tensors.size() ? c.tensors[i].name : std::string("<end>")) + "'");
    }
    if (c.tensors[i].shape != p.value.shape()) {
      throw TensorNameMismatchError("checkpoint: tensor '" + name + "' has shape " + c.tensors[i].shape.str() +
                                    ", expected " + p.value.shape().str());
    }
    p.value = Tensor<float>(c.tensors[i].shape, c.tensors[i].data);
    ++i;
  });
  if (state) {
    state->step = c.manifest.value("step", std::int64_t{0});
    state->optimizer = optimizer_from(c);
  }
  if (extra) *extra = c.manifest.value("extra", nlohmann::json());
  return net;
}

}  // namespace vndiff
