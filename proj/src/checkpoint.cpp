#include <bit>
#include <cstring>

#include "json.hpp"

#include "munet/error.hpp"
#include "munet/pipeline.hpp"

namespace munet {

namespace {

constexpr char kMagic[] = "MUNET1";
constexpr size_t kMagicSize = sizeof(kMagic) - 1;

template <class T>
void put(std::string& out, T value) {
  for (size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((value >> (8 * b)) & 0xff));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

struct Reader {
  const std::string& bytes;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    if (bytes.size() - pos < n) throw ParseError(std::string("checkpoint truncated in ") + what);
  }

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (size_t b = 0; b < sizeof(T); ++b)
      v |= static_cast<T>(static_cast<unsigned char>(bytes[pos + b])) << (8 * b);
    pos += sizeof(T);
    return v;
  }

  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

} // namespace

std::string save_checkpoint(const Network& net) {
  std::string out(kMagic, kMagicSize);
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, network_config_to_json(net.config));
  const auto blocks = net.params.blocks();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& [name, m] : blocks) {
    put_string(out, name);
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m->rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m->cols()));
    // Row-major payload.
    for (long r = 0; r < m->rows(); ++r)
      for (long c = 0; c < m->cols(); ++c) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>((*m)(r, c)));
  }
  return out;
}

Network load_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicSize || bytes.compare(0, kMagicSize, kMagic) != 0)
    throw ParseError("not a checkpoint (bad magic string)");
  Reader in{bytes, kMagicSize};
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                     std::to_string(kCheckpointVersion) + ")");
  Network net;
  try {
    net = build_network(network_config_from_json(in.get_string("config")));
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }
  auto blocks = net.params.blocks();
  const auto count = in.get<std::uint32_t>("block count");
  if (count != blocks.size())
    throw ParseError("checkpoint has " + std::to_string(count) + " blocks, configuration needs " +
                     std::to_string(blocks.size()));
  for (auto& [name, m] : blocks) {
    const std::string stored = in.get_string("block name");
    if (stored != name) throw ParseError("checkpoint block '" + stored + "' found where '" + name + "' was expected");
    if (in.get<std::uint32_t>("block rank") != 2) throw ParseError("checkpoint block " + name + " is not rank 2");
    const auto rows = in.get<std::uint64_t>("block shape");
    const auto cols = in.get<std::uint64_t>("block shape");
    if (rows != static_cast<std::uint64_t>(m->rows()) || cols != static_cast<std::uint64_t>(m->cols()))
      throw ParseError("checkpoint block " + name + " has the wrong shape");
    in.need(rows * cols * 8, "block payload");
    for (long r = 0; r < m->rows(); ++r)
      for (long c = 0; c < m->cols(); ++c) (*m)(r, c) = std::bit_cast<double>(in.get<std::uint64_t>("payload"));
  }
  if (in.pos != bytes.size()) throw ParseError("trailing bytes after checkpoint payload");
  return net;
}

std::string checkpoint_manifest(const Network& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [name, m] : net.params.blocks())
    layers.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}});
  nlohmann::json j = {{"format", kMagic},
                      {"version", kCheckpointVersion},
                      {"parameters", net.params.scalar_count()},
                      {"network", nlohmann::json::parse(network_config_to_json(net.config))},
                      {"layers", layers}};
  return j.dump(2);
}

} // namespace munet
