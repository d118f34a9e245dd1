#pragma once

#include <string>
#include <vector>

#include "stnreid/rng.hpp"
#include "stnreid/tensor.hpp"

namespace stnreid {

// Directional crop description. keep_fraction is the drawn (continuous)
// fraction; the rect extents are its integer realization.
struct CropSpec {
  enum class Direction { kTop = 0, kBottom = 1, kLeft = 2, kRight = 3 };
  Direction direction = Direction::kTop;
  float keep_fraction = 1.0f;
  int row0 = 0, row1 = 0, col0 = 0, col1 = 0;
};

const char* direction_name(CropSpec::Direction d);

struct DatasetEntry {
  Tensor image;  // [3,H,W], values in [0,1]
  int person_id = 0;
  int cam_id = 0;
  std::string source;  // file path or synthetic tag
};

struct DatasetIndex {
  std::vector<DatasetEntry> entries;
  int num_ids = 0;
  std::vector<std::vector<int>> by_id;  // entry indices per person id

  void rebuild_by_id();
  int height() const;
  int width() const;
};

// ---------------------------------------------------------------------------
// Image ops
// ---------------------------------------------------------------------------

// Align-corners bilinear resize of a [1,C,H,W] tensor.
Tensor bilinear_resize(const Tensor& img, int out_h, int out_w);

Tensor hflip(const Tensor& img);

// Crops 20-60% of the extent away in a uniformly chosen direction (keeping
// the slab anchored at the opposite side, full cross axis), then resizes the
// kept region back to the input size. Removal range is configurable.
std::pair<Tensor, CropSpec> generate_partial(const Tensor& holistic, Rng& rng,
                                             float removed_min = 0.2f, float removed_max = 0.6f);

struct AugmentFlags {
  bool hflip = false;
  bool random_crop = false;
  bool partial_aug = false;
  float removed_min = 0.2f;
  float removed_max = 0.6f;
};

Tensor augment(const Tensor& image, Rng& rng, const AugmentFlags& flags);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

// P distinct identities, K entries each (with replacement inside an identity
// when it has fewer than K images). Returns entry indices, grouped by id.
std::vector<int> pk_sample(const DatasetIndex& index, int p, int k, Rng& rng);

// Procedural identities: a distinctive base color plus 2-4 fixed rectangles
// per id, with per-image brightness/translation/noise nuisance.
DatasetIndex synth_dataset(int num_ids, int imgs_per_id, int h, int w, uint64_t seed);

// Reads `<id>_c<cam>_<seq>.ppm` files (Market1501-style prefix); skips
// unparseable names with a warning; ids are reindexed contiguously.
DatasetIndex load_dataset(const std::string& dir_path);

// Writes a dataset using the filename convention above.
void save_dataset(const std::string& dir_path, const DatasetIndex& index);

// Stacks entries into a [B,3,H,W] batch.
Tensor stack_images(const DatasetIndex& index, const std::vector<int>& entry_indices);

Tensor unsqueeze(const Tensor& chw);              // [C,H,W] -> [1,C,H,W]
Tensor slice_batch_item(const Tensor& batch, int n);  // [N,C,H,W] -> [1,C,H,W]

// ---------------------------------------------------------------------------
// PPM (P6) I/O
// ---------------------------------------------------------------------------

void write_ppm(const std::string& path, const Tensor& img);  // [3,H,W] or [1,3,H,W]
Tensor read_ppm(const std::string& path);                    // -> [3,H,W]

}  // namespace stnreid
