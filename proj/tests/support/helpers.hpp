#pragma once

#include "ctxseg/model.hpp"

#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace ctxseg_test {

// Unique scratch directory, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = std::filesystem::temp_directory_path() /
           ("ctxseg_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Small smooth-activation model for finite-difference checks.
inline ctxseg::ModelConfig tiny_model_config() {
  ctxseg::ModelConfig mc;
  mc.backbone.base_width = 2;
  mc.backbone.n_stages = 2;
  mc.backbone.encoder_blocks = 1;
  mc.backbone.decoder_blocks = 1;
  mc.backbone.stem_blocks = 0;
  mc.backbone.fusion_scales = {4};
  mc.backbone.patch_size = {4, 4, 4};
  mc.backbone.activation = ctxseg::Act::gelu;
  mc.token_dim = 8;
  mc.modality_tokens = 2;
  mc.heads = 2;
  mc.ffn_ratio = 2;
  return mc;
}

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  double worst_analytic = 0.0, worst_fd = 0.0;
};

// Disagreements below atol are finite-difference noise, not gradient errors.
inline double grad_rel_err(double fd, double an, double atol = 1e-8) {
  double err = std::abs(fd - an);
  if (err <= atol) return 0.0;
  return err / std::max(std::abs(fd), std::abs(an));
}

// Central finite differences over every coordinate of every parameter
// (or a deterministic subset when max_coords_per_param > 0).
inline FdReport fd_check_params(ctxseg::ParamStore<double>& store,
                                const ctxseg::Grads<double>& analytic,
                                const std::function<double()>& loss, double h,
                                int max_coords_per_param = -1, double atol = 1e-8) {
  FdReport report;
  for (auto& p : store) {
    const ctxseg::Index size = p.w.size();
    ctxseg::Index step = 1;
    if (max_coords_per_param > 0 && size > max_coords_per_param)
      step = size / max_coords_per_param;
    for (ctxseg::Index i = 0; i < size; i += step) {
      double orig = p.w.data()[i];
      p.w.data()[i] = orig + h;
      double lp = loss();
      p.w.data()[i] = orig - h;
      double lm = loss();
      p.w.data()[i] = orig;
      double fd = (lp - lm) / (2 * h);
      double an = analytic.at(p.id).data()[i];
      double rel = grad_rel_err(fd, an, atol);
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name + "[" + std::to_string(i) + "]";
        report.worst_analytic = an;
        report.worst_fd = fd;
      }
    }
  }
  return report;
}

}  // namespace ctxseg_test
