#include "ebyd/nncore/checkpoint.hpp"

#include <cstdio>

#include "ebyd/errors.hpp"
#include "ebyd/nncore/binary_io.hpp"
#include "ebyd/nncore/rng.hpp"

namespace ebyd {
namespace {

constexpr std::string_view kMagic = "EBYD";
constexpr std::string_view kMaskName = "@unit_mask";
constexpr std::string_view kDeltaPrefix = "@delta/";

void write_array(ByteWriter& out, std::string_view name, const DenseArray& array) {
  out.u32(static_cast<std::uint32_t>(name.size()));
  out.raw(name);
  out.u32(static_cast<std::uint32_t>(array.rank()));
  for (auto d : array.dims()) out.u32(static_cast<std::uint32_t>(d));
  for (float v : array.values()) out.f32(v);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelBundle& model) {
  model.validate();
  ByteWriter out;
  out.raw(kMagic);
  out.u32(kCheckpointVersion);
  const auto& arch = model.arch;
  out.u32(static_cast<std::uint32_t>(arch.input.channels));
  out.u32(static_cast<std::uint32_t>(arch.input.height));
  out.u32(static_cast<std::uint32_t>(arch.input.width));
  out.u32(static_cast<std::uint32_t>(arch.num_classes));
  out.u32(static_cast<std::uint32_t>(arch.layers.size()));
  for (const auto& layer : arch.layers) {
    out.u8(static_cast<std::uint8_t>(layer.kind));
    out.u32(static_cast<std::uint32_t>(layer.units));
  }
  std::size_t count = model.params.size() + (model.unit_mask ? 1 : 0) +
                      (model.weight_perturbation ? model.weight_perturbation->size() : 0);
  out.u32(static_cast<std::uint32_t>(count));
  for (const auto& [name, array] : model.params) write_array(out, name, array);
  if (model.unit_mask) write_array(out, kMaskName, *model.unit_mask);
  if (model.weight_perturbation) {
    for (const auto& [name, array] : *model.weight_perturbation) {
      write_array(out, std::string(kDeltaPrefix) + name, array);
    }
  }
  return out.take();
}

ModelBundle decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.set_context("magic");
  const auto magic = in.raw(kMagic.size());
  if (std::string_view(reinterpret_cast<const char*>(magic.data()), magic.size()) != kMagic) {
    throw FormatError("bad checkpoint magic at byte offset 0 (expected \"EBYD\")");
  }
  in.set_context("version");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  }
  in.set_context("architecture");
  ModelBundle model;
  model.arch.input.channels = in.u32();
  model.arch.input.height = in.u32();
  model.arch.input.width = in.u32();
  model.arch.num_classes = in.u32();
  const std::uint32_t n_layers = in.u32();
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::uint8_t kind = in.u8();
    if (kind < 1 || kind > 5) {
      throw FormatError("unknown layer kind " + std::to_string(kind) + " at byte offset " +
                        std::to_string(in.offset() - 1));
    }
    model.arch.layers.push_back({static_cast<LayerKind>(kind), in.u32()});
  }
  in.set_context("array count");
  const std::uint32_t n_arrays = in.u32();
  for (std::uint32_t a = 0; a < n_arrays; ++a) {
    in.set_context("name of array #" + std::to_string(a));
    const std::uint32_t name_len = in.u32();
    const auto name_bytes = in.raw(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    in.set_context("array '" + name + "'");
    const std::uint32_t rank = in.u32();
    if (rank == 0 || rank > 8) {
      throw FormatError("array '" + name + "' has invalid rank " + std::to_string(rank) + " at byte offset " +
                        std::to_string(in.offset() - 4));
    }
    Dims dims(rank);
    for (auto& d : dims) d = in.u32();
    const std::size_t n = dims_product(dims);
    if (n == 0) throw FormatError("array '" + name + "' has a zero dimension");
    // Fails with a truncation error naming the array before allocating.
    if (n > in.remaining() / 4) in.raw(n * 4);
    std::vector<float> values(n);
    for (auto& v : values) v = in.f32();
    DenseArray array(std::move(dims), std::move(values));
    if (name == kMaskName) {
      model.unit_mask = std::move(array);
    } else if (name.starts_with(kDeltaPrefix)) {
      if (!model.weight_perturbation) model.weight_perturbation.emplace();
      model.weight_perturbation->emplace(name.substr(kDeltaPrefix.size()), std::move(array));
    } else {
      model.params.emplace(std::move(name), std::move(array));
    }
  }
  if (in.remaining() != 0) {
    throw FormatError("trailing bytes after last array at byte offset " + std::to_string(in.offset()));
  }
  try {
    model.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint content invalid: ") + e.what());
  }
  return model;
}

void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model));
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

std::string checkpoint_digest(const ModelBundle& model) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(std::span<const std::uint8_t>(encode_checkpoint(model)))));
  return buf;
}

}  // namespace ebyd
