#include "icseg/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace icseg {

namespace {

constexpr char kMagic[8] = {'I', 'C', 'S', 'E', 'G', 'C', 'K', 'P'};
constexpr uint32_t kVersion = 1;

enum class Dtype : uint8_t { f32 = 0, f64 = 1, i64 = 2, u64 = 3 };

// little-endian on all supported targets
struct Writer {
  std::string buf;

  template <typename T>
  void raw(const T& v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    buf.append(tmp, sizeof(T));
  }
  void bytes(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }

  void array(const std::string& name, Dtype dt, const Shape& dims, const void* data,
             size_t byte_len) {
    raw(uint16_t(name.size()));
    bytes(name.data(), name.size());
    raw(uint8_t(dt));
    raw(uint8_t(dims.size()));
    for (int64_t d : dims) raw(int64_t(d));
    raw(uint64_t(byte_len));
    bytes(data, byte_len);
  }
};

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  explicit Reader(const std::string& b) : buf(b) {}

  template <typename T>
  T raw() {
    check(pos + sizeof(T) <= buf.size(), "checkpoint truncated");
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string bytes(size_t n) {
    check(pos + n <= buf.size(), "checkpoint truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

struct NamedArray {
  Dtype dtype;
  Shape dims;
  std::string payload;

  int64_t numel() const { return shape_numel(dims); }
};

uint32_t crc_of(const std::string& data, size_t len) {
  return uint32_t(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data.data()), uInt(len)));
}

void put_f32(Writer& w, const std::string& name, const Tensor<float>& t) {
  w.array(name, Dtype::f32, t.shape(), t.data(), size_t(t.size()) * sizeof(float));
}
void put_f64_vec(Writer& w, const std::string& name, const std::vector<double>& v) {
  w.array(name, Dtype::f64, {int64_t(v.size())}, v.data(), v.size() * sizeof(double));
}
void put_i64(Writer& w, const std::string& name, int64_t v) {
  w.array(name, Dtype::i64, {1}, &v, sizeof(v));
}

Tensor<float> as_f32(const NamedArray& a, const std::string& name) {
  check(a.dtype == Dtype::f32, name + ": dtype mismatch");
  Tensor<float> t(a.dims);
  check(size_t(t.size()) * sizeof(float) == a.payload.size(), name + ": payload size mismatch");
  std::memcpy(t.data(), a.payload.data(), a.payload.size());
  return t;
}

std::vector<double> as_f64_vec(const NamedArray& a, const std::string& name) {
  check(a.dtype == Dtype::f64 && a.dims.size() == 1, name + ": dtype mismatch");
  std::vector<double> v(size_t(a.numel()));
  check(v.size() * sizeof(double) == a.payload.size(), name + ": payload size mismatch");
  std::memcpy(v.data(), a.payload.data(), a.payload.size());
  return v;
}

int64_t as_i64(const NamedArray& a, const std::string& name) {
  check(a.dtype == Dtype::i64 && a.numel() == 1, name + ": expected a single integer");
  int64_t v;
  std::memcpy(&v, a.payload.data(), sizeof(v));
  return v;
}

}  // namespace

void save_checkpoint(const TrainState& st, const std::string& path) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.raw(kVersion);

  const std::string cfg_text = st.model.cfg.to_kv().canonical_text();
  w.raw(crc_of(cfg_text, cfg_text.size()));  // config digest
  w.raw(uint64_t(cfg_text.size()));
  w.bytes(cfg_text.data(), cfg_text.size());

  std::vector<std::pair<std::string, const Tensor<float>*>> param_arrays;
  st.model.params.for_each([&](const std::string& name, const Parameter<float>& p) {
    param_arrays.emplace_back("param/" + name, &p.value);
  });

  uint64_t n_arrays = param_arrays.size() + 2 * st.opt.slots().size() + 6;
  if (!st.loss_log.empty()) ++n_arrays;
  w.raw(n_arrays);
  for (const auto& [name, tensor] : param_arrays) put_f32(w, name, *tensor);
  for (const auto& [name, slot] : st.opt.slots()) {
    put_f32(w, "adam/m/" + name, slot.m);
    put_f32(w, "adam/v/" + name, slot.v);
  }
  put_i64(w, "adam/t", st.opt.step_count());
  put_i64(w, "train/step", st.step);
  const auto rng_state = st.rng.state();
  w.array("rng/state", Dtype::u64, {4}, rng_state.data(), 4 * sizeof(uint64_t));
  put_f64_vec(w, "sched/beta", st.model.sched.beta);
  put_f64_vec(w, "sched/alpha", st.model.sched.alpha);
  put_f64_vec(w, "sched/alpha_bar", st.model.sched.alpha_bar);
  if (!st.loss_log.empty()) {
    w.array("train/loss_log", Dtype::f32, {int64_t(st.loss_log.size())}, st.loss_log.data(),
            st.loss_log.size() * sizeof(float));
  }

  const uint32_t crc = crc_of(w.buf, w.buf.size());
  w.raw(crc);

  std::ofstream out(path, std::ios::binary);
  check(out.good(), "cannot open checkpoint path for writing: " + path);
  out.write(w.buf.data(), std::streamsize(w.buf.size()));
  check(out.good(), "failed writing checkpoint: " + path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  check(buf.size() > sizeof(kMagic) + sizeof(uint32_t) * 2, "checkpoint too small");

  Reader r(buf);
  const std::string magic = r.bytes(sizeof(kMagic));
  check(std::memcmp(magic.data(), kMagic, sizeof(kMagic)) == 0, "not a checkpoint file");
  const uint32_t version = r.raw<uint32_t>();
  check(version == kVersion, "checkpoint format version mismatch: found " +
                                 std::to_string(version) + ", expected " +
                                 std::to_string(kVersion));

  uint32_t stored_crc;
  std::memcpy(&stored_crc, buf.data() + buf.size() - sizeof(uint32_t), sizeof(uint32_t));
  const uint32_t actual_crc = crc_of(buf, buf.size() - sizeof(uint32_t));
  check(stored_crc == actual_crc, "checkpoint checksum mismatch (file corrupt)");

  const uint32_t cfg_digest = r.raw<uint32_t>();
  const uint64_t cfg_len = r.raw<uint64_t>();
  const std::string cfg_text = r.bytes(size_t(cfg_len));
  check(crc_of(cfg_text, cfg_text.size()) == cfg_digest,
        "checkpoint config digest mismatch");
  KeyValueConfig kv = KeyValueConfig::parse_text(cfg_text);
  PipelineConfig cfg = PipelineConfig::from_kv(kv);
  kv.throw_if_unused();

  std::map<std::string, NamedArray> arrays;
  const uint64_t n_arrays = r.raw<uint64_t>();
  for (uint64_t i = 0; i < n_arrays; ++i) {
    const uint16_t name_len = r.raw<uint16_t>();
    const std::string name = r.bytes(name_len);
    NamedArray a;
    a.dtype = Dtype(r.raw<uint8_t>());
    const uint8_t rank = r.raw<uint8_t>();
    for (uint8_t d = 0; d < rank; ++d) a.dims.push_back(r.raw<int64_t>());
    const uint64_t byte_len = r.raw<uint64_t>();
    a.payload = r.bytes(size_t(byte_len));
    arrays.emplace(name, std::move(a));
  }

  auto need = [&](const std::string& name) -> const NamedArray& {
    auto it = arrays.find(name);
    check(it != arrays.end(), "checkpoint missing array: " + name);
    return it->second;
  };

  TrainState st = TrainState::init(cfg);
  st.model.params.for_each([&](const std::string& name, Parameter<float>& p) {
    Tensor<float> v = as_f32(need("param/" + name), name);
    check(v.shape() == p.value.shape(), "parameter shape mismatch for " + name);
    p.value = std::move(v);
  });
  for (auto& [name, slot] : st.opt.slots()) {
    slot.m = as_f32(need("adam/m/" + name), name);
    slot.v = as_f32(need("adam/v/" + name), name);
  }
  st.opt.set_step_count(as_i64(need("adam/t"), "adam/t"));
  st.step = as_i64(need("train/step"), "train/step");

  const NamedArray& rs = need("rng/state");
  check(rs.dtype == Dtype::u64 && rs.numel() == 4, "bad rng state");
  std::array<uint64_t, 4> state;
  std::memcpy(state.data(), rs.payload.data(), sizeof(state));
  st.rng.set_state(state);

  st.model.sched.beta = as_f64_vec(need("sched/beta"), "sched/beta");
  st.model.sched.alpha = as_f64_vec(need("sched/alpha"), "sched/alpha");
  st.model.sched.alpha_bar = as_f64_vec(need("sched/alpha_bar"), "sched/alpha_bar");
  st.model.sched.T = int64_t(st.model.sched.beta.size());

  auto it = arrays.find("train/loss_log");
  if (it != arrays.end()) {
    const NamedArray& a = it->second;
    st.loss_log.resize(size_t(a.numel()));
    std::memcpy(st.loss_log.data(), a.payload.data(), a.payload.size());
  }
  return st;
}

ModelStateF load_model(const std::string& path) { return load_checkpoint(path).model; }

}  // namespace icseg
