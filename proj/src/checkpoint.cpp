#include "capsct/checkpoint.hpp"

#include "binary_io.hpp"
#include "capsct/error.hpp"

namespace capsct {

namespace {

constexpr char kMagic[4] = {'C', 'V', 'C', 'P'};

bool is_running_stat(const std::string& name) {
  auto ends_with = [&](std::string_view s) {
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return ends_with(".running_mean") || ends_with(".running_var");
}

class Cursor {
 public:
  explicit Cursor(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v = detail::get_le<T>(reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_);
    pos_ += sizeof(T);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint is truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ParameterSet& params, const nlohmann::json& config) {
  std::string out(kMagic, 4);
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& [name, t] : params.entries()) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (double v : t.data()) detail::put_le<float>(out, static_cast<float>(v));
  }
  const std::string blob = config.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(blob.size()));
  out += blob;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Cursor in(bytes);
  if (in.take(4) != std::string(kMagic, 4)) throw DataError("not a checkpoint (bad magic)");
  const auto version = in.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint cp;
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.take(in.get<std::uint32_t>());
    Shape shape(in.get<std::uint32_t>());
    for (auto& e : shape) e = in.get<std::uint32_t>();
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = in.get<float>();
    const bool trainable = !is_running_stat(name);
    Tensor t(std::move(shape), std::move(values));
    if (trainable) t.set_requires_grad();
    cp.params.add(std::move(name), t, trainable);
  }
  const std::string blob = in.take(in.get<std::uint32_t>());
  if (!in.done()) throw DataError("trailing bytes after checkpoint config");
  try {
    cp.config = nlohmann::json::parse(blob);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  return cp;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const nlohmann::json& config) {
  detail::write_file(path, encode_checkpoint(params, config));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(detail::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void round_to_float(ParameterSet& params) {
  for (const auto& entry : params.entries()) {
    Tensor t = entry.second;
    for (auto& v : t.mutable_data()) v = static_cast<float>(v);
  }
}

}  // namespace capsct
