#pragma once

// Wavefront OBJ export/import. Vertex colors use the common "v x y z r g b"
// extension.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "pf3d/tetgrid.hpp"

namespace pf3d {

inline std::string to_obj(const SurfaceMesh& mesh) {
  const bool colored = mesh.colors.size() == mesh.vertices.size() && !mesh.colors.empty();
  std::string out;
  out.reserve(mesh.vertices.size() * 64 + mesh.triangles.size() * 24);
  char buf[160];
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    int n = colored ? std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g %.6f %.6f %.6f\n", v.x(), v.y(), v.z(),
                                    mesh.colors[i].x(), mesh.colors[i].y(), mesh.colors[i].z())
                    : std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v.x(), v.y(), v.z());
    out.append(buf, static_cast<std::size_t>(n));
  }
  for (const Tri& t : mesh.triangles) {
    int n = std::snprintf(buf, sizeof buf, "f %u %u %u\n", t[0] + 1, t[1] + 1, t[2] + 1);
    out.append(buf, static_cast<std::size_t>(n));
  }
  return out;
}

inline void write_obj(const std::filesystem::path& path, const SurfaceMesh& mesh) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << "# pf3d surface mesh\n" << to_obj(mesh);
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

inline SurfaceMesh read_obj(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  SurfaceMesh m;
  std::string line;
  bool any_color = false;
  while (std::getline(f, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      double x, y, z;
      ls >> x >> y >> z;
      if (!ls) throw std::runtime_error("malformed vertex in " + path.string());
      m.vertices.emplace_back(x, y, z);
      double r, g, b;
      if (ls >> r >> g >> b) {
        m.colors.emplace_back(r, g, b);
        any_color = true;
      }
    } else if (tag == "f") {
      std::vector<std::uint32_t> idx;
      std::string tok;
      while (ls >> tok) {
        const long v = std::stol(tok.substr(0, tok.find('/')));
        const long resolved = v < 0 ? static_cast<long>(m.vertices.size()) + v : v - 1;
        if (resolved < 0 || resolved >= static_cast<long>(m.vertices.size()))
          throw std::runtime_error("face index out of range in " + path.string());
        idx.push_back(static_cast<std::uint32_t>(resolved));
      }
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) m.triangles.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  if (any_color && m.colors.size() != m.vertices.size()) m.colors.clear();
  return m;
}

}  // namespace pf3d
