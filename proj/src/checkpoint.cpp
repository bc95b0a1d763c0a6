#include "patchforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "patchforge/errors.hpp"
#include "patchforge/json_io.hpp"

namespace patchforge {

namespace {

constexpr char kMagic[4] = {'P', 'F', 'G', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw IoError(std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Model& model, const PatchBank& bank, const nlohmann::json& meta) {
  if (bank.has_unfrozen()) throw SequencingError("cannot serialize a bank with an unfrozen patch");
  std::string out(kMagic, 4);
  const std::string header = nlohmann::json{{"model", model.config()}, {"meta", meta}}.dump();
  put_u64(out, header.size());
  out += header;
  for (const Matrix* m : model.parameters()) {
    for (double v : m->data()) put_f64(out, v);
  }
  put_u64(out, bank.size());
  for (const Patch& p : bank.patches()) {
    put_u64(out, p.id);
    put_u64(out, p.origin_example_id);
    put_f64(out, p.bias);
    for (double v : p.key) put_f64(out, v);
    for (double v : p.value) put_f64(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(4, "magic") != std::string(kMagic, 4)) throw IoError("not a checkpoint: bad magic bytes");
  const std::uint64_t header_len = in.u64("header length");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.take(header_len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint ck;
  const ModelConfig config = header.at("model").get<ModelConfig>();
  config.validate();
  ck.meta = header.value("meta", nlohmann::json::object());
  ck.model = Model(config);
  for (const ParamSlot& s : ck.model.parameters()) {
    for (double& v : s.value->data()) v = in.f64(s.name.c_str());
  }
  ck.bank = PatchBank(config.n_layers - 1);
  const std::uint64_t count = in.u64("patch count");
  for (std::uint64_t i = 0; i < count; ++i) {
    Patch p;
    p.id = in.u64("patch id");
    p.origin_example_id = in.u64("patch origin");
    p.bias = in.f64("patch bias");
    p.key.resize(config.d_model);
    p.value.resize(config.d_model);
    for (double& v : p.key) v = in.f64("patch key");
    for (double& v : p.value) v = in.f64("patch value");
    p.frozen = true;
    ck.bank.add(std::move(p));
  }
  if (!in.done()) throw IoError("checkpoint has trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const PatchBank& bank,
                     const nlohmann::json& meta) {
  const std::string bytes = encode_checkpoint(model, bank, meta);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace patchforge
