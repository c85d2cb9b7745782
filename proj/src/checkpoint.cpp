#include "kloc/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "kloc/rng.hpp"

namespace kloc {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace {

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  require(static_cast<bool>(is), Error::Kind::Checkpoint, "checkpoint: truncated file");
  return v;
}

std::string read_bytes(std::istream& is, uint32_t n) {
  std::string s(n, '\0');
  is.read(s.data(), n);
  require(static_cast<bool>(is), Error::Kind::Checkpoint, "checkpoint: truncated file");
  return s;
}

json config_to_json(const ModelConfig& c) {
  return json{{"L", c.L}, {"H", c.H}, {"T_max", c.T_max}, {"V", c.V}, {"d", c.d}, {"d_ff", c.d_ff}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.L = j.at("L").get<int>();
  c.H = j.at("H").get<int>();
  c.T_max = j.at("T_max").get<int>();
  c.V = j.at("V").get<int>();
  c.d = j.at("d").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const Parameters& p, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), Error::Kind::Checkpoint, "checkpoint: cannot open " + path + " for writing");

  os.write("KLOC", 4);
  write_u32(os, kCheckpointVersion);
  std::string cfg = config_to_json(p.cfg).dump();
  write_u32(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  auto arrays = p.named();
  write_u32(os, static_cast<uint32_t>(arrays.size()));
  for (const auto& [name, var] : arrays) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Tensor& t = var->value;
    write_u32(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  require(static_cast<bool>(os), Error::Kind::Checkpoint, "checkpoint: write failed for " + path);
}

Parameters load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), Error::Kind::Checkpoint, "checkpoint: cannot open " + path);

  std::string magic = read_bytes(is, 4);
  require(magic == "KLOC", Error::Kind::Checkpoint, "checkpoint: bad magic");
  uint32_t version = read_u32(is);
  require(version == kCheckpointVersion, Error::Kind::Checkpoint,
          "checkpoint: unsupported version " + std::to_string(version));
  ModelConfig cfg = config_from_json(json::parse(read_bytes(is, read_u32(is))));

  Parameters p = Parameters::init(cfg, 0);
  auto arrays = p.named();
  uint32_t count = read_u32(is);
  require(count == arrays.size(), Error::Kind::Checkpoint,
          "checkpoint: expected " + std::to_string(arrays.size()) + " arrays, found " + std::to_string(count));
  for (auto& [name, var] : arrays) {
    std::string got = read_bytes(is, read_u32(is));
    require(got == name, Error::Kind::Checkpoint, "checkpoint: array order mismatch at " + name);
    uint32_t ndim = read_u32(is);
    std::vector<int> shape(ndim);
    for (uint32_t i = 0; i < ndim; ++i) shape[i] = static_cast<int>(read_u32(is));
    require(shape == var->value.shape, Error::Kind::Checkpoint, "checkpoint: shape mismatch at " + name);
    is.read(reinterpret_cast<char*>(var->value.data.data()),
            static_cast<std::streamsize>(var->value.data.size() * sizeof(float)));
    require(static_cast<bool>(is), Error::Kind::Checkpoint, "checkpoint: truncated array " + name);
    require(var->value.all_finite(), Error::Kind::Checkpoint, "checkpoint: non-finite values in " + name);
  }
  return p;
}

std::string file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), Error::Kind::Checkpoint, "hash: cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  std::string bytes = buf.str();
  return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

std::string hash_hex(uint64_t h) {
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

}  // namespace kloc
