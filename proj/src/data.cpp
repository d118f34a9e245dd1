#include "stnreid/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;

namespace stnreid {

const char* direction_name(CropSpec::Direction d) {
  switch (d) {
    case CropSpec::Direction::kTop: return "top";
    case CropSpec::Direction::kBottom: return "bottom";
    case CropSpec::Direction::kLeft: return "left";
    case CropSpec::Direction::kRight: return "right";
  }
  return "?";
}

void DatasetIndex::rebuild_by_id() {
  by_id.assign(static_cast<size_t>(num_ids), {});
  for (size_t i = 0; i < entries.size(); ++i)
    by_id[static_cast<size_t>(entries[i].person_id)].push_back(static_cast<int>(i));
}

int DatasetIndex::height() const {
  require(!entries.empty(), "data", "empty dataset");
  return entries.front().image.dim(1);
}

int DatasetIndex::width() const {
  require(!entries.empty(), "data", "empty dataset");
  return entries.front().image.dim(2);
}

// ---------------------------------------------------------------------------
// Image ops
// ---------------------------------------------------------------------------

Tensor unsqueeze(const Tensor& chw) {
  require(chw.ndim() == 3, "data", "unsqueeze expects [C,H,W]");
  return chw.reshaped({1, chw.dim(0), chw.dim(1), chw.dim(2)});
}

Tensor slice_batch_item(const Tensor& batch, int n) {
  require(batch.ndim() == 4 && n >= 0 && n < batch.dim(0), "data", "bad batch slice");
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  Tensor out({1, c, h, w});
  const long long chw = static_cast<long long>(c) * h * w;
  std::copy(&batch.at(n, 0, 0, 0), &batch.at(n, 0, 0, 0) + chw, out.data());
  return out;
}

Tensor bilinear_resize(const Tensor& img, int out_h, int out_w) {
  require(img.ndim() == 4 && img.dim(0) == 1, "data", "bilinear_resize expects [1,C,H,W]");
  const int c = img.dim(1), h = img.dim(2), w = img.dim(3);
  Tensor out({1, c, out_h, out_w});
  const double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;
  for (int r = 0; r < out_h; ++r) {
    const double py = r * sy;
    const int y0 = std::min(static_cast<int>(py), h - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = py - y0;
    for (int q = 0; q < out_w; ++q) {
      const double px = q * sx;
      const int x0 = std::min(static_cast<int>(px), w - 1);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = px - x0;
      for (int ch = 0; ch < c; ++ch) {
        const double v = (1.0 - wy) * ((1.0 - wx) * img.at(0, ch, y0, x0) +
                                       wx * img.at(0, ch, y0, x1)) +
                         wy * ((1.0 - wx) * img.at(0, ch, y1, x0) + wx * img.at(0, ch, y1, x1));
        out.at(0, ch, r, q) = static_cast<float>(v);
      }
    }
  }
  return out;
}

Tensor hflip(const Tensor& img) {
  require(img.ndim() == 4 && img.dim(0) == 1, "data", "hflip expects [1,C,H,W]");
  const int c = img.dim(1), h = img.dim(2), w = img.dim(3);
  Tensor out(img.dims());
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < h; ++r)
      for (int q = 0; q < w; ++q) out.at(0, ch, r, q) = img.at(0, ch, r, w - 1 - q);
  return out;
}

std::pair<Tensor, CropSpec> generate_partial(const Tensor& holistic, Rng& rng, float removed_min,
                                             float removed_max) {
  require(holistic.ndim() == 4 && holistic.dim(0) == 1, "data",
          "generate_partial expects [1,C,H,W]");
  const int h = holistic.dim(2), w = holistic.dim(3);
  require(h >= 16 && w >= 16, "data", "image too small for partial generation");

  CropSpec spec;
  spec.direction = static_cast<CropSpec::Direction>(rng.uniform_int(4));
  const float removed = static_cast<float>(rng.uniform(removed_min, removed_max));
  spec.keep_fraction = 1.0f - removed;

  spec.row0 = 0;
  spec.row1 = h;
  spec.col0 = 0;
  spec.col1 = w;
  switch (spec.direction) {
    case CropSpec::Direction::kTop: {
      const int kh = std::max(1, static_cast<int>(std::lround(spec.keep_fraction * h)));
      spec.row0 = h - kh;
      break;
    }
    case CropSpec::Direction::kBottom: {
      const int kh = std::max(1, static_cast<int>(std::lround(spec.keep_fraction * h)));
      spec.row1 = kh;
      break;
    }
    case CropSpec::Direction::kLeft: {
      const int kw = std::max(1, static_cast<int>(std::lround(spec.keep_fraction * w)));
      spec.col0 = w - kw;
      break;
    }
    case CropSpec::Direction::kRight: {
      const int kw = std::max(1, static_cast<int>(std::lround(spec.keep_fraction * w)));
      spec.col1 = kw;
      break;
    }
  }

  const int ch = holistic.dim(1);
  const int crop_h = spec.row1 - spec.row0, crop_w = spec.col1 - spec.col0;
  Tensor crop({1, ch, crop_h, crop_w});
  for (int c = 0; c < ch; ++c)
    for (int r = 0; r < crop_h; ++r)
      for (int q = 0; q < crop_w; ++q)
        crop.at(0, c, r, q) = holistic.at(0, c, spec.row0 + r, spec.col0 + q);
  return {bilinear_resize(crop, h, w), spec};
}

Tensor augment(const Tensor& image, Rng& rng, const AugmentFlags& flags) {
  Tensor out = image;
  if (flags.hflip && rng.uniform() < 0.5) out = hflip(out);
  if (flags.random_crop) {
    const int pad = 10;
    const int off_y = rng.uniform_int(2 * pad + 1);
    const int off_x = rng.uniform_int(2 * pad + 1);
    const int c = out.dim(1), h = out.dim(2), w = out.dim(3);
    Tensor shifted({1, c, h, w});
    for (int ch2 = 0; ch2 < c; ++ch2)
      for (int r = 0; r < h; ++r) {
        const int sr = r + off_y - pad;
        for (int q = 0; q < w; ++q) {
          const int sq = q + off_x - pad;
          shifted.at(0, ch2, r, q) = (sr >= 0 && sr < h && sq >= 0 && sq < w)
                                         ? out.at(0, ch2, sr, sq)
                                         : 0.0f;
        }
      }
    out = std::move(shifted);
  }
  if (flags.partial_aug && rng.uniform() < 0.5)
    out = generate_partial(out, rng, flags.removed_min, flags.removed_max).first;
  return out;
}

// ---------------------------------------------------------------------------
// PK sampling
// ---------------------------------------------------------------------------

std::vector<int> pk_sample(const DatasetIndex& index, int p, int k, Rng& rng) {
  require(p >= 1 && k >= 1, "data", "pk_sample needs P,K >= 1");
  require(index.num_ids >= p, "data",
          "pk_sample needs at least P=" + std::to_string(p) + " ids, dataset has " +
              std::to_string(index.num_ids));
  std::vector<int> ids(static_cast<size_t>(index.num_ids));
  for (int i = 0; i < index.num_ids; ++i) ids[static_cast<size_t>(i)] = i;
  rng.shuffle(ids.begin(), ids.end());
  ids.resize(static_cast<size_t>(p));

  std::vector<int> batch;
  batch.reserve(static_cast<size_t>(p) * k);
  for (int id : ids) {
    const auto& pool = index.by_id[static_cast<size_t>(id)];
    require(!pool.empty(), "data", "identity " + std::to_string(id) + " has no images");
    if (static_cast<int>(pool.size()) >= k) {
      std::vector<int> order = pool;
      rng.shuffle(order.begin(), order.end());
      for (int i = 0; i < k; ++i) batch.push_back(order[static_cast<size_t>(i)]);
    } else {
      for (int i = 0; i < k; ++i)
        batch.push_back(pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Synthetic identities
// ---------------------------------------------------------------------------

namespace {

constexpr int kPaletteSize = 64;  // rejection sampling saturates near here

struct SynthRect {
  int r0, r1, c0, c1;
  float color[3];
};

// Identities come in confusable pairs: the same base-color ratios, band
// layout, colors and bar, with band thickness as the only difference (thin
// for the even id, thick for its mate). Crop-and-resize stretches band
// thickness, so unaligned matching confuses the pair; an aligned crop
// deforms probe and gallery the same way and keeps the cue intact.
std::vector<SynthRect> pair_layout(int pair, int mate, int h, int w, uint64_t seed) {
  Rng rng(hash_combine(seed, 0x9A1C0 + static_cast<uint64_t>(pair)));
  const double thin = 0.05 + 0.02 * rng.uniform();
  const double thickness = mate == 0 ? thin : 2.4 * thin;
  std::vector<SynthRect> rects;
  // two full-width bands; thickness codes the id within the pair
  const double rows[2] = {0.10 + 0.15 * rng.uniform(), 0.52 + 0.18 * rng.uniform()};
  for (double rowf : rows) {
    SynthRect rect;
    const int rh = std::max(2, static_cast<int>(std::lround(thickness * h)));
    rect.r0 = std::min(h - rh, static_cast<int>(std::lround(rowf * h)));
    rect.r1 = rect.r0 + rh;
    rect.c0 = 0;
    rect.c1 = w;
    for (float& c : rect.color) c = static_cast<float>(rng.uniform());
    rects.push_back(rect);
  }
  // one full-height bar, identical for both ids of the pair
  {
    SynthRect rect;
    const int rw = std::max(2, static_cast<int>(std::lround((0.10 + 0.05 * rng.uniform()) * w)));
    rect.c0 = std::min(w - rw, static_cast<int>(std::lround((0.15 + 0.5 * rng.uniform()) * w)));
    rect.c1 = rect.c0 + rw;
    rect.r0 = 0;
    rect.r1 = h;
    for (float& c : rect.color) c = static_cast<float>(rng.uniform());
    rects.push_back(rect);
  }
  return rects;
}

// Mate ids share base-color channel ratios (the odd id is a 1.32x scaled
// copy), so scalar brightness jitter overlaps them; the dominant channel
// still keeps a >= 0.2 separation, as does every non-mate pair. The first
// twelve pairs come from a fixed slot grid (guaranteed separable for any
// seed); further pairs are rejection-sampled.
void assign_pair_palette(int num_ids, uint64_t seed, std::vector<std::array<float, 3>>& bases) {
  Rng rng(hash_combine(seed, 0xC01));
  bases.clear();
  const float kMateScale = 1.32f;
  const float kBig = 0.63f;
  const float kOthers[2] = {0.08f, 0.30f};

  std::vector<std::array<float, 3>> slots;
  for (int big = 0; big < 3; ++big)
    for (float o1 : kOthers)
      for (float o2 : kOthers) {
        std::array<float, 3> c = {o1, o1, o2};
        c[static_cast<size_t>(big)] = kBig;
        if (big == 0) {
          c[1] = o1;
          c[2] = o2;
        } else if (big == 1) {
          c[0] = o1;
          c[2] = o2;
        } else {
          c[0] = o1;
          c[1] = o2;
        }
        slots.push_back(c);
      }
  rng.shuffle(slots.begin(), slots.end());

  auto far_from_all = [&](const std::array<float, 3>& c) {
    for (const auto& other : bases) {
      float gap = 0;
      for (int ch = 0; ch < 3; ++ch) gap = std::max(gap, std::abs(c[ch] - other[ch]));
      if (gap < 0.2f) return false;
    }
    return true;
  };
  auto push_pair = [&](const std::array<float, 3>& even, bool with_mate) {
    bases.push_back(even);
    if (with_mate) {
      std::array<float, 3> odd;
      for (int ch = 0; ch < 3; ++ch) odd[static_cast<size_t>(ch)] = even[static_cast<size_t>(ch)] * kMateScale;
      bases.push_back(odd);
    }
  };

  for (int id = 0; id < num_ids; id += 2) {
    const bool with_mate = id + 1 < num_ids;
    const size_t pair_idx = static_cast<size_t>(id / 2);
    if (pair_idx < slots.size()) {
      push_pair(slots[pair_idx], with_mate);
      continue;
    }
    bool placed = false;
    for (int attempt = 0; attempt < 4000 && !placed; ++attempt) {
      std::array<float, 3> even;
      const int big = rng.uniform_int(3);
      for (int ch = 0; ch < 3; ++ch)
        even[static_cast<size_t>(ch)] =
            ch == big ? static_cast<float>(rng.uniform(0.625, 0.66))
                      : static_cast<float>(rng.uniform(0.05, 0.55));
      std::array<float, 3> odd;
      for (int ch = 0; ch < 3; ++ch) odd[static_cast<size_t>(ch)] = even[static_cast<size_t>(ch)] * kMateScale;
      if (!far_from_all(even)) continue;
      bases.push_back(even);
      if (with_mate) {
        if (!far_from_all(odd)) {
          bases.pop_back();
          continue;
        }
        bases.push_back(odd);
      }
      placed = true;
    }
    require(placed, "data", "num_ids exceeds separable palette");
  }
}

}  // namespace

DatasetIndex synth_dataset(int num_ids, int imgs_per_id, int h, int w, uint64_t seed) {
  require(num_ids >= 2 && imgs_per_id >= 2, "data", "synth_dataset needs >=2 ids and >=2 images");
  require(num_ids <= kPaletteSize, "data",
          "num_ids exceeds separable palette of " + std::to_string(kPaletteSize));
  require(h >= 16 && w >= 16, "data", "synth image too small");

  std::vector<std::array<float, 3>> bases;
  assign_pair_palette(num_ids, seed, bases);

  DatasetIndex index;
  index.num_ids = num_ids;
  index.entries.reserve(static_cast<size_t>(num_ids) * imgs_per_id);

  for (int id = 0; id < num_ids; ++id) {
    const float* base = bases[static_cast<size_t>(id)].data();
    std::vector<SynthRect> rects = pair_layout(id / 2, id % 2, h, w, seed);

    for (int img = 0; img < imgs_per_id; ++img) {
      Rng img_rng(hash_combine(seed, 0x1000003ULL * static_cast<uint64_t>(id) +
                                         static_cast<uint64_t>(img)));
      const float brightness = static_cast<float>(img_rng.uniform(0.8, 1.2));
      const int dy = img_rng.uniform_int(17) - 8;
      const int dx = img_rng.uniform_int(17) - 8;

      Tensor image({3, h, w});
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < h; ++r)
          for (int q = 0; q < w; ++q) image.at(c, r, q) = base[c];
      for (const auto& rect : rects) {
        const int r0 = std::clamp(rect.r0 + dy, 0, h), r1 = std::clamp(rect.r1 + dy, 0, h);
        const int c0 = std::clamp(rect.c0 + dx, 0, w), c1 = std::clamp(rect.c1 + dx, 0, w);
        for (int c = 0; c < 3; ++c)
          for (int r = r0; r < r1; ++r)
            for (int q = c0; q < c1; ++q) image.at(c, r, q) = rect.color[c];
      }
      for (long long i = 0; i < image.numel(); ++i) {
        float v = image[i] * brightness + static_cast<float>(img_rng.normal()) * 0.02f;
        image[i] = std::clamp(v, 0.0f, 1.0f);
      }

      DatasetEntry entry;
      entry.image = std::move(image);
      entry.person_id = id;
      entry.cam_id = (img % 2) + 1;
      entry.source = "synth:" + std::to_string(id) + ":" + std::to_string(img);
      index.entries.push_back(std::move(entry));
    }
  }
  index.rebuild_by_id();
  return index;
}

// ---------------------------------------------------------------------------
// PPM I/O and directory datasets
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor& img) {
  const Tensor* chw = &img;
  Tensor tmp;
  if (img.ndim() == 4) {
    require(img.dim(0) == 1, "data", "write_ppm expects a single image");
    tmp = img.reshaped({img.dim(1), img.dim(2), img.dim(3)});
    chw = &tmp;
  }
  require(chw->ndim() == 3 && chw->dim(0) == 3, "data", "write_ppm expects [3,H,W]");
  const int h = chw->dim(1), w = chw->dim(2);
  std::ofstream os(path, std::ios::binary);
  require(os.is_open(), "data", "cannot open for write: " + path);
  os << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int r = 0; r < h; ++r) {
    for (int q = 0; q < w; ++q)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(chw->at(c, r, q) * 255.0f + 0.5f, 0.0f, 255.0f);
        row[static_cast<size_t>(q) * 3 + c] = static_cast<unsigned char>(v);
      }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

namespace {

int next_pnm_token(std::istream& is, std::string& tok) {
  tok.clear();
  int ch = is.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
    } else if (std::isspace(ch)) {
      ch = is.get();
    } else {
      break;
    }
  }
  while (ch != EOF && !std::isspace(ch)) {
    tok.push_back(static_cast<char>(ch));
    ch = is.get();
  }
  return tok.empty() ? -1 : 0;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.is_open(), "data", "cannot open for read: " + path);
  std::string tok;
  require(next_pnm_token(is, tok) == 0 && tok == "P6", "data", "not a P6 PPM: " + path);
  require(next_pnm_token(is, tok) == 0, "data", "bad PPM header: " + path);
  const int w = std::stoi(tok);
  require(next_pnm_token(is, tok) == 0, "data", "bad PPM header: " + path);
  const int h = std::stoi(tok);
  require(next_pnm_token(is, tok) == 0, "data", "bad PPM header: " + path);
  const int maxval = std::stoi(tok);
  require(w >= 1 && h >= 1 && maxval >= 1 && maxval <= 255, "data",
          "unsupported PPM header: " + path);
  Tensor img({3, h, w});
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int r = 0; r < h; ++r) {
    is.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    require(is.good(), "data", "truncated PPM: " + path);
    for (int q = 0; q < w; ++q)
      for (int c = 0; c < 3; ++c)
        img.at(c, r, q) =
            static_cast<float>(row[static_cast<size_t>(q) * 3 + c]) / static_cast<float>(maxval);
  }
  return img;
}

namespace {

// Parses "<id>_c<cam>_<seq>" filename stems.
bool parse_market_name(const std::string& stem, int& pid, int& cam) {
  const size_t us = stem.find("_c");
  if (us == std::string::npos || us == 0) return false;
  const std::string id_part = stem.substr(0, us);
  for (char c : id_part)
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
  size_t pos = us + 2;
  std::string cam_part;
  while (pos < stem.size() && std::isdigit(static_cast<unsigned char>(stem[pos])))
    cam_part.push_back(stem[pos++]);
  if (cam_part.empty()) return false;
  if (pos >= stem.size() || stem[pos] != '_') return false;
  pid = std::stoi(id_part);
  cam = std::stoi(cam_part);
  return true;
}

}  // namespace

DatasetIndex load_dataset(const std::string& dir_path) {
  require(fs::is_directory(dir_path), "data", "not a directory: " + dir_path);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir_path))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());

  DatasetIndex index;
  std::vector<int> raw_ids;
  for (const auto& file : files) {
    int pid = 0, cam = 0;
    const std::string ext = file.extension().string();
    if (ext != ".ppm" || !parse_market_name(file.stem().string(), pid, cam)) {
      std::cerr << "warning: data: skipping unparseable file " << file.filename().string()
                << "\n";
      continue;
    }
    DatasetEntry entry;
    entry.image = read_ppm(file.string());
    entry.person_id = pid;  // reindexed below
    entry.cam_id = cam;
    entry.source = file.string();
    raw_ids.push_back(pid);
    index.entries.push_back(std::move(entry));
  }
  require(!index.entries.empty(), "data", "no usable images in " + dir_path);

  std::vector<int> sorted_ids = raw_ids;
  std::sort(sorted_ids.begin(), sorted_ids.end());
  sorted_ids.erase(std::unique(sorted_ids.begin(), sorted_ids.end()), sorted_ids.end());
  std::map<int, int> remap;
  for (size_t i = 0; i < sorted_ids.size(); ++i)
    remap[sorted_ids[i]] = static_cast<int>(i);
  for (auto& entry : index.entries) entry.person_id = remap[entry.person_id];
  index.num_ids = static_cast<int>(sorted_ids.size());
  index.rebuild_by_id();
  return index;
}

void save_dataset(const std::string& dir_path, const DatasetIndex& index) {
  fs::create_directories(dir_path);
  std::vector<int> seq(static_cast<size_t>(index.num_ids), 0);
  for (const auto& entry : index.entries) {
    char name[64];
    std::snprintf(name, sizeof(name), "%04d_c%d_%03d.ppm", entry.person_id, entry.cam_id,
                  seq[static_cast<size_t>(entry.person_id)]++);
    write_ppm((fs::path(dir_path) / name).string(), entry.image);
  }
}

Tensor stack_images(const DatasetIndex& index, const std::vector<int>& entry_indices) {
  require(!entry_indices.empty(), "data", "cannot stack an empty batch");
  const Tensor& first = index.entries[static_cast<size_t>(entry_indices[0])].image;
  const int c = first.dim(0), h = first.dim(1), w = first.dim(2);
  Tensor out({static_cast<int>(entry_indices.size()), c, h, w});
  const long long chw = static_cast<long long>(c) * h * w;
  for (size_t i = 0; i < entry_indices.size(); ++i) {
    const Tensor& img = index.entries[static_cast<size_t>(entry_indices[i])].image;
    require(img.dim(0) == c && img.dim(1) == h && img.dim(2) == w, "data",
            "mixed image sizes in batch");
    std::copy(img.data(), img.data() + chw, out.data() + static_cast<long long>(i) * chw);
  }
  return out;
}

}  // namespace stnreid
