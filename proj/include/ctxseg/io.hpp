#pragma once

#include "ctxseg/volume.hpp"

#include <string>
#include <vector>

namespace ctxseg {

// Raw little-endian voxel block plus a JSON sidecar (same path with ".json"
// appended) carrying dims, spacing, axes, kind, and dtype.
void save_raw_volume(const Volume& v, const std::string& path);
Volume load_raw_volume(const std::string& path);

// Minimal NIfTI-1 support: .nii and .nii.gz, axis-aligned affines only.
// Orientation is recovered from the sform (or qform) direction signs.
Volume load_nifti(const std::string& path);
void save_nifti(const Volume& v, const std::string& path);

// Dispatch on extension: .nii/.nii.gz -> NIfTI, .raw -> raw+sidecar.
Volume load_volume(const std::string& path, VolumeKind kind);

// 8-bit grayscale PGM (binary P5).
void save_pgm(const std::string& path, const std::vector<unsigned char>& pixels, int height,
              int width);

}  // namespace ctxseg
