#pragma once

// On-disk dataset: a directory with manifest.json plus, per sample, source/target PLY files,
// the ground-truth transform (12-number line) and the ground-truth pairs as `i,j` CSV.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "rgm/io.hpp"
#include "rgm/solve.hpp"
#include "rgm/synth.hpp"

namespace rgm::dataset {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kManifestVersion = 1;

struct Entry {
  std::string id;
  std::uint64_t seed = 0;
  synth::Shape shape = synth::Shape::sphere;
  synth::ProtocolSettings settings;
  std::string source, target, transform, correspondence;  // paths relative to the manifest
};

struct Dataset {
  fs::path root;
  std::vector<Entry> entries;
};

inline json settings_json(const synth::ProtocolSettings& s) {
  return {{"mode", synth::to_string(s.mode)},
          {"n_points", s.n_points},
          {"rot_range_deg", s.rot_range_deg},
          {"trans_range", s.trans_range},
          {"keep_fraction", s.keep_fraction},
          {"noise_sigma", s.noise_sigma},
          {"noise_clip", s.noise_clip},
          {"max_corr_dist", s.max_corr_dist},
          {"seed", s.seed}};
}

inline synth::ProtocolSettings settings_from_json(const json& j) {
  synth::ProtocolSettings s;
  s.mode = synth::mode_from_string(j.at("mode").get<std::string>());
  s.n_points = j.at("n_points").get<std::size_t>();
  s.rot_range_deg = j.at("rot_range_deg").get<double>();
  s.trans_range = j.at("trans_range").get<double>();
  s.keep_fraction = j.at("keep_fraction").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.noise_clip = j.at("noise_clip").get<double>();
  s.max_corr_dist = j.at("max_corr_dist").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

/// Seed of sample k of a dataset generated from `seed`.
inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t k) {
  return solve::splitmix64(solve::splitmix64(seed) + static_cast<std::uint64_t>(k));
}

/// Sample k uses shape shapes[k % shapes.size()] and its own generator.
inline synth::RegistrationSample generate_sample(const synth::ProtocolSettings& base, const std::vector<synth::Shape>& shapes,
                                                 std::size_t k, std::uint64_t* seed_out = nullptr) {
  if (shapes.empty()) throw ParameterError("dataset: shape list is empty");
  synth::ProtocolSettings s = base;
  s.seed = sample_seed(base.seed, k);
  if (seed_out) *seed_out = s.seed;
  Rng rng(s.seed);
  return synth::make_pair(shapes[k % shapes.size()], s, rng);
}

inline std::vector<synth::RegistrationSample> generate(const synth::ProtocolSettings& base,
                                                       const std::vector<synth::Shape>& shapes, std::size_t pairs) {
  std::vector<synth::RegistrationSample> out;
  out.reserve(pairs);
  for (std::size_t k = 0; k < pairs; ++k) out.push_back(generate_sample(base, shapes, k));
  return out;
}

inline std::string sample_id(std::size_t k) {
  std::string s = std::to_string(k);
  return std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

/// Writes every sample file and then the manifest (the manifest appearing marks completion).
inline fs::path write(const fs::path& dir, const synth::ProtocolSettings& base, const std::vector<synth::Shape>& shapes,
                      std::size_t pairs) {
  base.validate();
  fs::create_directories(dir / "samples");
  json samples = json::array();
  for (std::size_t k = 0; k < pairs; ++k) {
    std::uint64_t seed = 0;
    auto smp = generate_sample(base, shapes, k, &seed);
    std::string id = sample_id(k);
    Entry e{id, seed, smp.shape, smp.settings, "samples/" + id + "_src.ply", "samples/" + id + "_dst.ply",
            "samples/" + id + "_gt.txt", "samples/" + id + "_corr.csv"};
    io::write_cloud(dir / e.source, smp.source);
    io::write_cloud(dir / e.target, smp.target);
    io::write_transform(dir / e.transform, smp.gt_transform);
    io::write_atomic(dir / e.correspondence, smp.gt_correspondence.csv());
    samples.push_back({{"id", e.id},
                       {"seed", e.seed},
                       {"shape_id", synth::to_string(e.shape)},
                       {"settings", settings_json(e.settings)},
                       {"source", e.source},
                       {"target", e.target},
                       {"transform", e.transform},
                       {"correspondence", e.correspondence}});
  }
  std::vector<std::string> shape_names;
  for (auto s : shapes) shape_names.push_back(synth::to_string(s));
  json manifest = {{"format", "rgm-dataset"},
                   {"version", kManifestVersion},
                   {"pairs", pairs},
                   {"shapes", shape_names},
                   {"settings", settings_json(base)},
                   {"samples", samples}};
  fs::path path = dir / "manifest.json";
  io::write_atomic(path, manifest.dump(2) + "\n");
  return path;
}

/// Accepts either the manifest file or the directory holding it.
inline Dataset read_manifest(const fs::path& where) {
  fs::path path = fs::is_directory(where) ? where / "manifest.json" : where;
  std::string text = io::read_text(path);
  Dataset ds;
  ds.root = path.parent_path();
  try {
    json m = json::parse(text);
    if (m.value("format", std::string()) != "rgm-dataset") throw FormatError(path.string() + ": not a dataset manifest");
    if (m.at("version").get<int>() != kManifestVersion)
      throw FormatError(path.string() + ": unsupported manifest version");
    for (const auto& s : m.at("samples")) {
      Entry e;
      e.id = s.at("id").get<std::string>();
      e.seed = s.at("seed").get<std::uint64_t>();
      e.shape = synth::shape_from_string(s.at("shape_id").get<std::string>());
      e.settings = settings_from_json(s.at("settings"));
      e.source = s.at("source").get<std::string>();
      e.target = s.at("target").get<std::string>();
      e.transform = s.at("transform").get<std::string>();
      e.correspondence = s.at("correspondence").get<std::string>();
      ds.entries.push_back(std::move(e));
    }
  } catch (const json::exception& ex) {
    throw FormatError(path.string() + ": malformed manifest (" + ex.what() + ")");
  } catch (const ParameterError& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  return ds;
}

inline synth::RegistrationSample load_sample(const Dataset& ds, const Entry& e) {
  PointCloud X = io::read_cloud(ds.root / e.source);
  PointCloud Y = io::read_cloud(ds.root / e.target);
  RigidTransform T = io::read_transform(ds.root / e.transform);
  fs::path cp = ds.root / e.correspondence;
  Correspondences C = Correspondences::parse_csv(io::read_text(cp), X.size(), Y.size(), cp.string());
  return {X, Y, T, C, e.settings, e.shape};
}

inline std::vector<synth::RegistrationSample> load_all(const Dataset& ds) {
  std::vector<synth::RegistrationSample> out;
  out.reserve(ds.entries.size());
  for (const auto& e : ds.entries) out.push_back(load_sample(ds, e));
  return out;
}

}  // namespace rgm::dataset
