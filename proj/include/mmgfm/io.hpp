#pragma once

// On-disk format: a JSON manifest plus one delimiter-separated matrix per
// file. Matrix files carry a single header row of variable names, one data
// row per unit, and shortest round-trip decimal encoding, so a save/load
// cycle reproduces every value bit for bit. Fit artifacts persist the model
// parameters, the variational state, the ELBO trace, and the configuration.

#include <mmgfm/types.hpp>
#include <mmgfm/vem.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mmgfm {

inline constexpr int format_version = 1;

struct CsvTable {
  std::vector<std::string> header;
  MatrixX<double> values;
};

// Writes values under a header row; numbers use the shortest decimal form
// that parses back to the same double.
void write_matrix_csv(const std::filesystem::path& path,
                      const MatrixX<double>& values,
                      const std::vector<std::string>& header);

// Throws std::runtime_error naming the file, line, and column on any
// malformed cell or ragged row.
CsvTable read_matrix_csv(const std::filesystem::path& path);

// Writes manifest.json plus per-study covariate and per-(study, modality)
// data files (with trial counts and any nonzero offsets) into dir; returns
// the manifest path. Saving the same dataset twice produces byte-identical
// files.
std::filesystem::path save_dataset(const Dataset& ds,
                                   const std::filesystem::path& dir);

// Parses the manifest, loads and shape-checks every referenced matrix, then
// runs the full dataset validation; throws std::runtime_error describing the
// first problem (missing file, shape mismatch naming the file, or the list
// of validation violations).
Dataset load_dataset(const std::filesystem::path& manifest_path);

// Persists theta (one matrix per file + parameter manifest), the variational
// state, elbo_trace, convergence flags, and the config including the seed.
void save_fit(const FitResult& result, const FitConfig& cfg,
              const std::filesystem::path& dir);

// Reloads a fit artifact; the returned state recomputes the same ELBO on the
// originating dataset to 1e-8 relative. Rejects artifacts written by a newer
// format version without returning partial state.
struct LoadedFit {
  FitResult result;
  FitConfig config;
};
LoadedFit load_fit(const std::filesystem::path& dir);

}  // namespace mmgfm
