#include "fedcsap/datagen/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "fedcsap/numerics/errors.hpp"
#include "fedcsap/numerics/random.hpp"
#include "fedcsap/util/binary_io.hpp"

namespace fedcsap {

namespace {

constexpr std::string_view kDatasetMagic = "FCSD1";
constexpr int kPrototypeRetries = 1000;

Tensor styled_example(const Tensor& prototype, const StyleParams& style, double noise_sigma, const ImageShape& shape,
                      Rng& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor img(shape.shape());
  const Index plane = shape.height * shape.width;
  for (Index c = 0; c < shape.channels; ++c) {
    const double bias = style.channel_bias.empty() ? 0.0 : style.channel_bias[static_cast<std::size_t>(c)];
    for (Index p = 0; p < plane; ++p) {
      const Index i = c * plane + p;
      const double eps = noise_sigma > 0.0 ? noise_sigma * noise(rng) : 0.0;
      img[i] = style.contrast_scale * (prototype[i] + eps) + style.brightness_shift + bias;
    }
  }
  return img;
}

// Per-channel offset plus pixel-level pattern, both N(0, 1), so classes differ
// in their global channel statistics as well as spatially.
Tensor sample_prototype(const ImageShape& shape, Rng& rng) {
  Tensor proto = normal_tensor(shape.shape(), 1.0, rng);
  const Tensor offsets = normal_tensor({shape.channels}, 1.0, rng);
  const Index plane = shape.height * shape.width;
  for (Index c = 0; c < shape.channels; ++c) proto.data().segment(c * plane, plane).array() += offsets[c];
  return proto;
}

bool same_examples(const std::vector<Example>& a, const std::vector<Example>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].label != b[i].label || a[i].domain != b[i].domain || !a[i].image.identical(b[i].image)) return false;
  }
  return true;
}

}  // namespace

void SyntheticTaskConfig::validate() const {
  if (num_classes < 2) throw ConfigError("data.num_classes: need at least 2 classes");
  if (shots_per_class < 1) throw ConfigError("data.shots_per_class: need at least 1 shot");
  if (!(class_margin > 0.0)) throw ConfigError("data.class_margin: must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma: must be non-negative");
  if (image_shape.channels < 1 || image_shape.height < 1 || image_shape.width < 1) {
    throw ConfigError("data.image_shape: extents must be positive");
  }
  if (domains.empty()) throw ConfigError("data.domains: need at least one domain");
  for (std::size_t k = 0; k < domains.size(); ++k) {
    const std::string where = "data.domains[" + std::to_string(k) + "]";
    if (!(domains[k].contrast_scale > 0.0)) throw ConfigError(where + ".contrast_scale: must be positive");
    if (!domains[k].channel_bias.empty() &&
        static_cast<Index>(domains[k].channel_bias.size()) != image_shape.channels) {
      throw ConfigError(where + ".channel_bias: need one entry per image channel");
    }
  }
}

Dataset generate_dataset(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  Dataset data;
  data.image_shape = cfg.image_shape;
  data.num_classes = cfg.num_classes;
  data.shots_per_class = cfg.shots_per_class;
  data.num_domains = static_cast<Index>(cfg.domains.size());

  Rng proto_rng(derive_seed(cfg.seed, "data.prototypes"));
  std::vector<Tensor> prototypes;
  for (Index k = 0; k < cfg.num_classes; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kPrototypeRetries && !placed; ++attempt) {
      Tensor candidate = sample_prototype(cfg.image_shape, proto_rng);
      placed = std::all_of(prototypes.begin(), prototypes.end(), [&](const Tensor& p) {
        return (p.data() - candidate.data()).norm() >= cfg.class_margin;
      });
      if (placed) prototypes.push_back(std::move(candidate));
    }
    if (!placed) {
      throw ConfigError("data.class_margin: could not place class " + std::to_string(k) + " at distance " +
                        std::to_string(cfg.class_margin) + " after " + std::to_string(kPrototypeRetries) + " draws");
    }
    data.class_names.push_back("class_" + std::to_string(k));
  }

  Rng train_rng(derive_seed(cfg.seed, "data.train"));
  Rng eval_rng(derive_seed(cfg.seed, "data.eval"));
  for (Index k = 0; k < cfg.num_classes; ++k) {
    for (Index dom = 0; dom < data.num_domains; ++dom) {
      const StyleParams& style = cfg.domains[static_cast<std::size_t>(dom)];
      for (Index s = 0; s < cfg.shots_per_class; ++s) {
        data.train.push_back(
            {styled_example(prototypes[k], style, cfg.noise_sigma, cfg.image_shape, train_rng), k, dom});
      }
      for (Index s = 0; s < cfg.shots_per_class; ++s) {
        data.eval.push_back({styled_example(prototypes[k], style, cfg.noise_sigma, cfg.image_shape, eval_rng), k, dom});
      }
    }
  }
  return data;
}

bool Dataset::identical(const Dataset& other) const {
  return image_shape == other.image_shape && num_classes == other.num_classes &&
         shots_per_class == other.shots_per_class && num_domains == other.num_domains &&
         class_names == other.class_names && same_examples(train, other.train) && same_examples(eval, other.eval);
}

ClassSplit base_new_split(std::vector<Index> class_ids) {
  if (class_ids.size() < 2) throw InputError("base_new_split: need at least 2 classes");
  std::sort(class_ids.begin(), class_ids.end());
  if (std::adjacent_find(class_ids.begin(), class_ids.end()) != class_ids.end()) {
    throw InputError("base_new_split: duplicate class id");
  }
  const std::size_t n_base = (class_ids.size() + 1) / 2;
  ClassSplit split;
  split.base.assign(class_ids.begin(), class_ids.begin() + static_cast<std::ptrdiff_t>(n_base));
  split.novel.assign(class_ids.begin() + static_cast<std::ptrdiff_t>(n_base), class_ids.end());
  return split;
}

std::vector<ClientShard> partition_clients(const Dataset& data, std::span<const Index> base_classes, Index per_client,
                                           Index shots) {
  if (per_client < 1) throw ConfigError("per_client_classes: must be at least 1");
  if (shots < 1 || shots > data.shots_per_class) {
    throw ConfigError("shots: must lie in [1, " + std::to_string(data.shots_per_class) + "]");
  }
  if (base_classes.empty() || static_cast<Index>(base_classes.size()) % per_client != 0) {
    throw ConfigError("per_client_classes: " + std::to_string(base_classes.size()) +
                      " base classes are not divisible by " + std::to_string(per_client) +
                      "; adjust num_classes or per_client_classes");
  }
  std::vector<Index> sorted(base_classes.begin(), base_classes.end());
  std::sort(sorted.begin(), sorted.end());
  const Index n_clients = static_cast<Index>(sorted.size()) / per_client;
  std::vector<ClientShard> shards;
  for (Index i = 0; i < n_clients; ++i) {
    ClientShard shard;
    shard.client_id = i;
    shard.domain_id = i % data.num_domains;
    shard.class_ids.assign(sorted.begin() + i * per_client, sorted.begin() + (i + 1) * per_client);
    for (Index cls : shard.class_ids) {
      if (cls < 0 || cls >= data.num_classes) throw ConfigError("base class id out of range");
      shard.class_names.push_back(data.class_names[static_cast<std::size_t>(cls)]);
      Index taken = 0;
      for (const Example& ex : data.train) {
        if (ex.label == cls && ex.domain == shard.domain_id && taken < shots) {
          shard.examples.push_back(ex);
          ++taken;
        }
      }
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

namespace {

void write_examples(std::ostream& out, const std::vector<Example>& examples) {
  binary::write_u64(out, examples.size());
  for (const Example& ex : examples) {
    binary::write_u64(out, static_cast<std::uint64_t>(ex.label));
    binary::write_u64(out, static_cast<std::uint64_t>(ex.domain));
    for (Index i = 0; i < ex.image.size(); ++i) binary::write_f64(out, ex.image[i]);
  }
}

std::vector<Example> read_examples(std::istream& in, const ImageShape& shape) {
  const std::uint64_t count = binary::read_u64(in, "example count");
  std::vector<Example> examples;
  for (std::uint64_t k = 0; k < count; ++k) {
    Example ex;
    ex.label = static_cast<Index>(binary::read_u64(in, "label"));
    ex.domain = static_cast<Index>(binary::read_u64(in, "domain"));
    ex.image = Tensor(shape.shape());
    for (Index i = 0; i < ex.image.size(); ++i) ex.image[i] = binary::read_f64(in, "pixel");
    examples.push_back(std::move(ex));
  }
  return examples;
}

}  // namespace

void save_dataset(const Dataset& data, std::ostream& out) {
  binary::write_bytes(out, kDatasetMagic);
  binary::write_u64(out, static_cast<std::uint64_t>(data.image_shape.channels));
  binary::write_u64(out, static_cast<std::uint64_t>(data.image_shape.height));
  binary::write_u64(out, static_cast<std::uint64_t>(data.image_shape.width));
  binary::write_u64(out, static_cast<std::uint64_t>(data.num_classes));
  binary::write_u64(out, static_cast<std::uint64_t>(data.shots_per_class));
  binary::write_u64(out, static_cast<std::uint64_t>(data.num_domains));
  binary::write_u64(out, data.class_names.size());
  for (const std::string& name : data.class_names) {
    binary::write_u32(out, static_cast<std::uint32_t>(name.size()));
    binary::write_bytes(out, name);
  }
  write_examples(out, data.train);
  write_examples(out, data.eval);
  if (!out) throw FormatError("failed writing dataset");
}

Dataset load_dataset(std::istream& in) {
  binary::expect_magic(in, kDatasetMagic);
  Dataset data;
  data.image_shape.channels = static_cast<Index>(binary::read_u64(in, "channels"));
  data.image_shape.height = static_cast<Index>(binary::read_u64(in, "height"));
  data.image_shape.width = static_cast<Index>(binary::read_u64(in, "width"));
  data.num_classes = static_cast<Index>(binary::read_u64(in, "num_classes"));
  data.shots_per_class = static_cast<Index>(binary::read_u64(in, "shots"));
  data.num_domains = static_cast<Index>(binary::read_u64(in, "num_domains"));
  const std::uint64_t names = binary::read_u64(in, "name count");
  for (std::uint64_t k = 0; k < names; ++k) {
    const std::uint32_t len = binary::read_u32(in, "name length");
    data.class_names.push_back(binary::read_string(in, len, "class name"));
  }
  data.train = read_examples(in, data.image_shape);
  data.eval = read_examples(in, data.image_shape);
  return data;
}

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  save_dataset(data, out);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return load_dataset(in);
}

}  // namespace fedcsap
