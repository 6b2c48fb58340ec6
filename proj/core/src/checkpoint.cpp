#include "vitscope/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace vitscope {

namespace {

constexpr std::string_view kMagic = "VITSCOPE-ARCHIVE";
constexpr std::string_view kConfigPrefix = "config.";

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

void put_f32(std::string& out, double value) {
  const std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(static_cast<float>(value)));
  char buf[4];
  std::memcpy(buf, &bits, 4);
  out.append(buf, 4);
}

double get_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  return static_cast<double>(std::bit_cast<float>(to_le(bits)));
}

bool bad_token(const std::string& s) {
  return s.empty() || s.find_first_of(" \t\r\n") != std::string::npos;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) {
    throw CheckpointError("meta " + key + ": expected an unsigned integer, got '" + text + "'");
  }
  return v;
}

Tensor labels_tensor(const std::vector<int>& labels) {
  std::vector<double> v(labels.begin(), labels.end());
  return Tensor::from({labels.size()}, std::move(v));
}

std::vector<int> labels_from(const Tensor& t) {
  std::vector<int> out;
  out.reserve(t.numel());
  for (double v : t.data()) {
    if (v != std::round(v) || v < 0) throw CheckpointError("label tensor holds a non-class value");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

}  // namespace

std::string git_blob_hash(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw std::runtime_error("git_blob_hash: EVP_MD_CTX_new failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("git_blob_hash: digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string git_blob_hash_file(const std::filesystem::path& path) {
  return git_blob_hash(read_file(path));
}

const Tensor& TensorArchive::at(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw CheckpointError(kind + " archive has no tensor '" + name + "'");
}

const std::string& TensorArchive::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw CheckpointError(kind + " archive has no meta key '" + key + "'");
  return it->second;
}

std::string encode_archive(const TensorArchive& archive) {
  if (bad_token(archive.kind)) throw CheckpointError("archive kind must be a single token");
  std::ostringstream head;
  head << kMagic << ' ' << kArchiveVersion << ' ' << archive.kind << '\n';
  for (const auto& [key, value] : archive.meta) {
    if (bad_token(key) || value.find_first_of("\r\n") != std::string::npos ||
        (!value.empty() && (value.front() == ' ' || value.back() == ' '))) {
      throw CheckpointError("meta entry '" + key + "' is not encodable");
    }
    head << "meta " << key << ' ' << value << '\n';
  }
  std::string payload;
  for (const auto& [name, t] : archive.tensors) {
    if (bad_token(name)) throw CheckpointError("tensor name '" + name + "' is not encodable");
    head << "tensor " << name << " f32 " << t.ndim();
    for (auto d : t.shape()) head << ' ' << d;
    head << ' ' << t.numel() * 4 << '\n';
    for (double v : t.data()) put_f32(payload, v);
  }
  head << "payload " << payload.size() << ' ' << git_blob_hash(payload) << '\n' << "end\n";
  return head.str() + payload;
}

TensorArchive decode_archive(std::string_view bytes) {
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) {
      throw CheckpointError("archive header truncated after line " + std::to_string(line_no));
    }
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    return line;
  };
  auto fail = [&](const std::string& what) {
    return CheckpointError("archive header line " + std::to_string(line_no) + ": " + what);
  };

  TensorArchive out;
  {
    std::istringstream first(next_line());
    std::string magic;
    int version = 0;
    if (!(first >> magic) || magic != kMagic) throw fail("not a vitscope archive");
    if (!(first >> version) || version != kArchiveVersion) {
      throw fail("unsupported format version " + std::to_string(version));
    }
    if (!(first >> out.kind)) throw fail("missing archive kind");
  }

  struct Record {
    std::string name;
    Shape shape;
    std::size_t nbytes = 0;
  };
  std::vector<Record> records;
  std::size_t declared = 0;
  std::string declared_hash;
  bool have_payload = false;
  for (bool ended = false; !ended;) {
    const std::string line = next_line();
    std::istringstream in(line);
    std::string kind;
    in >> kind;
    if (kind == "meta") {
      std::string key;
      if (!(in >> key)) throw fail("malformed meta line");
      std::string value;
      std::getline(in, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      out.meta[key] = value;
    } else if (kind == "tensor") {
      Record r;
      std::string dtype;
      std::size_t ndim = 0;
      if (!(in >> r.name >> dtype >> ndim)) throw fail("malformed tensor record");
      if (dtype != "f32") throw fail("unsupported element type '" + dtype + "'");
      r.shape.resize(ndim);
      for (auto& d : r.shape) {
        if (!(in >> d)) throw fail("malformed shape for " + r.name);
      }
      if (!(in >> r.nbytes)) throw fail("missing byte length for " + r.name);
      if (r.nbytes != shape_numel(r.shape) * 4) {
        throw fail("byte length of " + r.name + " disagrees with its shape");
      }
      records.push_back(std::move(r));
    } else if (kind == "payload") {
      if (!(in >> declared >> declared_hash)) throw fail("malformed payload line");
      have_payload = true;
    } else if (kind == "end") {
      ended = true;
    } else {
      throw fail("unknown record '" + kind + "'");
    }
  }
  if (!have_payload) throw CheckpointError("archive header has no payload line");

  const std::string_view payload = bytes.substr(pos);
  std::size_t total = 0;
  for (const auto& r : records) total += r.nbytes;
  if (total != declared) {
    throw CheckpointError("tensor records declare " + std::to_string(total) +
                          " bytes, payload line says " + std::to_string(declared));
  }
  if (payload.size() != declared) {
    throw CheckpointError("payload is " + std::to_string(payload.size()) +
                          " bytes, header declares " + std::to_string(declared));
  }
  if (git_blob_hash(payload) != declared_hash) throw CheckpointError("payload hash mismatch");

  std::size_t offset = 0;
  for (const auto& r : records) {
    std::vector<double> values(shape_numel(r.shape));
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = get_f32(payload.data() + offset + 4 * i);
    }
    offset += r.nbytes;
    out.tensors.push_back({r.name, Tensor::from(r.shape, std::move(values))});
  }
  return out;
}

TensorArchive to_archive(const Checkpoint& ckpt) {
  TensorArchive a;
  a.kind = "model";
  for (const auto& [key, value] : ckpt.meta) {
    if (key.starts_with(kConfigPrefix)) {
      throw CheckpointError("meta key '" + key + "' uses the reserved config. prefix");
    }
    a.meta[key] = value;
  }
  const auto& c = ckpt.params.config;
  const std::pair<const char*, std::uint64_t> fields[] = {
      {"image_size", c.image_size}, {"channels", c.channels},   {"patch_size", c.patch_size},
      {"n_blocks", c.n_blocks},     {"d_model", c.d_model},     {"n_heads", c.n_heads},
      {"mlp_hidden", c.mlp_hidden}, {"n_classes", c.n_classes}, {"seed", c.seed}};
  for (const auto& [key, value] : fields) {
    a.meta[std::string(kConfigPrefix) + key] = std::to_string(value);
  }
  a.tensors = ckpt.params.named_tensors();
  return a;
}

Checkpoint checkpoint_from_archive(const TensorArchive& archive) {
  if (archive.kind != "model") {
    throw CheckpointError("expected a model archive, found '" + archive.kind + "'");
  }
  Checkpoint out;
  ViTConfig c;
  auto get = [&](const char* key) {
    const std::string full = std::string(kConfigPrefix) + key;
    return parse_u64(full, archive.meta_at(full));
  };
  c.image_size = get("image_size");
  c.channels = get("channels");
  c.patch_size = get("patch_size");
  c.n_blocks = get("n_blocks");
  c.d_model = get("d_model");
  c.n_heads = get("n_heads");
  c.mlp_hidden = get("mlp_hidden");
  c.n_classes = get("n_classes");
  c.seed = get("seed");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  for (const auto& [key, value] : archive.meta) {
    if (!key.starts_with(kConfigPrefix)) out.meta[key] = value;
  }

  out.params = init_params(c, c.seed);
  auto slots = out.params.named_tensors();
  if (slots.size() != archive.tensors.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(archive.tensors.size()) +
                          " tensors, the model expects " + std::to_string(slots.size()));
  }
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const auto& src = archive.tensors[k];
    auto& dst = slots[k];
    if (dst.name != src.name || dst.tensor.shape() != src.tensor.shape()) {
      throw CheckpointError("tensor " + src.name + " " + shape_str(src.tensor.shape()) +
                            " does not match model slot " + dst.name + " " +
                            shape_str(dst.tensor.shape()));
    }
    std::copy(src.tensor.data().begin(), src.tensor.data().end(),
              dst.tensor.mutable_data().begin());
  }
  return out;
}

std::string encode_checkpoint(const Checkpoint& ckpt) { return encode_archive(to_archive(ckpt)); }

Checkpoint decode_checkpoint(std::string_view bytes) {
  return checkpoint_from_archive(decode_archive(bytes));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

TensorArchive to_archive(const DataBundle& data) {
  TensorArchive a;
  a.kind = "data";
  a.meta["target_class"] = std::to_string(data.target_class);
  a.meta["pairs"] = std::to_string(data.pairs.size());
  a.tensors.push_back({"pairs.clean", data.pairs.clean});
  a.tensors.push_back({"pairs.triggered", data.pairs.triggered});
  a.tensors.push_back({"test.clean.images", data.clean_test.images});
  a.tensors.push_back({"test.clean.labels", labels_tensor(data.clean_test.labels)});
  a.tensors.push_back({"test.triggered.images", data.triggered_test.images});
  a.tensors.push_back({"test.triggered.labels", labels_tensor(data.triggered_test.labels)});
  return a;
}

DataBundle data_from_archive(const TensorArchive& archive) {
  if (archive.kind != "data") {
    throw CheckpointError("expected a data archive, found '" + archive.kind + "'");
  }
  DataBundle d;
  d.target_class = static_cast<int>(parse_u64("target_class", archive.meta_at("target_class")));
  d.pairs.clean = archive.at("pairs.clean");
  d.pairs.triggered = archive.at("pairs.triggered");
  d.clean_test.images = archive.at("test.clean.images");
  d.clean_test.labels = labels_from(archive.at("test.clean.labels"));
  d.triggered_test.images = archive.at("test.triggered.images");
  d.triggered_test.labels = labels_from(archive.at("test.triggered.labels"));
  if (d.pairs.clean.shape() != d.pairs.triggered.shape() ||
      d.clean_test.images.dim(0) != d.clean_test.size() ||
      d.triggered_test.images.dim(0) != d.triggered_test.size()) {
    throw CheckpointError("data archive tensors are misaligned");
  }
  return d;
}

TensorArchive to_archive(const DirectionSet& dirs) {
  TensorArchive a;
  a.kind = "directions";
  a.meta["mode"] = to_string(dirs.mode);
  a.meta["pairs"] = std::to_string(dirs.pair_count);
  for (std::size_t l = 0; l < dirs.layers(); ++l) {
    a.tensors.push_back({"r." + std::to_string(l),
                         Tensor::from({dirs.vectors[l].size()}, dirs.vectors[l])});
  }
  return a;
}

DirectionSet directions_from_archive(const TensorArchive& archive) {
  if (archive.kind != "directions") {
    throw CheckpointError("expected a directions archive, found '" + archive.kind + "'");
  }
  DirectionSet d;
  d.mode = steering_mode_from_string(archive.meta_at("mode"));
  d.pair_count = parse_u64("pairs", archive.meta_at("pairs"));
  for (std::size_t l = 0; l < archive.tensors.size(); ++l) {
    const Tensor& t = archive.at("r." + std::to_string(l));
    d.vectors.emplace_back(t.data().begin(), t.data().end());
  }
  return d;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

}  // namespace vitscope
