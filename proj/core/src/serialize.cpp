#include "slottok/serialize.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "slottok/rng.hpp"

namespace slottok {

using nlohmann::json;

std::uint64_t weights_hash(const std::vector<ad::Tensor*>& tensors) {
  Fnv1a h;
  for (const ad::Tensor* t : tensors) {
    h.update(t->name.data(), t->name.size());
    const std::int64_t r = t->value.rows(), c = t->value.cols();
    h.update(&r, sizeof(r));
    h.update(&c, sizeof(c));
    h.update(t->value.data(), sizeof(double) * static_cast<std::size_t>(t->value.size()));
  }
  return h.digest();
}

namespace {
constexpr char kMagic[4] = {'S', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const json& meta,
                     const std::vector<ad::Tensor*>& tensors) {
  json header = meta;
  json tlist = json::array();
  for (const ad::Tensor* t : tensors) {
    tlist.push_back({{"name", t->name},
                     {"rows", t->value.rows()},
                     {"cols", t->value.cols()}});
  }
  header["tensors"] = std::move(tlist);
  header["weights_hash"] = hex64(weights_hash(tensors));
  const std::string js = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f.write(kMagic, 4);
  f.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
  const std::uint64_t jlen = js.size();
  f.write(reinterpret_cast<const char*>(&jlen), sizeof(jlen));
  f.write(js.data(), static_cast<std::streamsize>(js.size()));
  for (const ad::Tensor* t : tensors)
    f.write(reinterpret_cast<const char*>(t->value.data()),
            static_cast<std::streamsize>(sizeof(double) * t->value.size()));
  if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

namespace {

json read_header(std::ifstream& f, const std::string& path) {
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t jlen = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  f.read(reinterpret_cast<char*>(&jlen), sizeof(jlen));
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  std::string js(jlen, '\0');
  f.read(js.data(), static_cast<std::streamsize>(jlen));
  if (!f) throw std::runtime_error("checkpoint: truncated header in " + path);
  return json::parse(js);
}

}  // namespace

json load_checkpoint(const std::string& path, std::vector<ad::Tensor*>& tensors) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  json header = read_header(f, path);

  struct Entry {
    std::streamoff offset;
    Eigen::Index rows, cols;
  };
  std::map<std::string, Entry> index;
  std::streamoff off = f.tellg();
  for (const auto& t : header.at("tensors")) {
    Entry e;
    e.rows = t.at("rows").get<Eigen::Index>();
    e.cols = t.at("cols").get<Eigen::Index>();
    e.offset = off;
    index[t.at("name").get<std::string>()] = e;
    off += static_cast<std::streamoff>(sizeof(double)) * e.rows * e.cols;
  }
  for (ad::Tensor* t : tensors) {
    auto it = index.find(t->name);
    if (it == index.end())
      throw std::runtime_error("load_checkpoint: missing tensor " + t->name);
    const Entry& e = it->second;
    if (e.rows != t->value.rows() || e.cols != t->value.cols())
      throw std::runtime_error("load_checkpoint: shape mismatch for " + t->name);
    f.seekg(e.offset);
    f.read(reinterpret_cast<char*>(t->value.data()),
           static_cast<std::streamsize>(sizeof(double) * t->value.size()));
    if (!f) throw std::runtime_error("load_checkpoint: truncated data in " + path);
    t->zero_grad();
  }
  return header;
}

json peek_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("peek_checkpoint: cannot open " + path);
  return read_header(f, path);
}

}  // namespace slottok
