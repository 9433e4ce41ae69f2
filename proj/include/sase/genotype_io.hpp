#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "sase/supernet.hpp"

namespace sase {

/// Compact JSON: {"version":1,"edges":{"SQUEEZE_CH":...,...}} in edge order.
inline std::string serialize_genotype(const Genotype& g) {
  g.validate();
  nlohmann::ordered_json edges = nlohmann::ordered_json::object();
  for (int e = 0; e < kNumEdges; ++e) edges[std::string(kEdgeNames[e])] = std::string(g.kind(e));
  nlohmann::ordered_json doc;
  doc["version"] = g.version;
  doc["edges"] = std::move(edges);
  return doc.dump();
}

/// Strict inverse of serialize_genotype: unknown keys, missing edges and
/// kinds from the wrong set are rejected.
inline Genotype parse_genotype(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Format, std::string("genotype: malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) fail(ErrorKind::Format, "genotype: top level must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it)
    if (it.key() != "version" && it.key() != "edges") fail(ErrorKind::Format, "genotype: unknown key " + it.key());
  if (!doc.contains("version") || !doc["version"].is_number_integer())
    fail(ErrorKind::Format, "genotype: missing integer version");
  Genotype g;
  g.version = doc["version"].get<int>();
  if (g.version != 1) fail(ErrorKind::Format, "genotype: unsupported version " + std::to_string(g.version));
  if (!doc.contains("edges") || !doc["edges"].is_object()) fail(ErrorKind::Format, "genotype: missing edges object");
  const auto& edges = doc["edges"];
  for (auto it = edges.begin(); it != edges.end(); ++it) {
    bool known = false;
    for (auto name : kEdgeNames) known = known || it.key() == name;
    if (!known) fail(ErrorKind::Format, "genotype: unknown edge " + it.key());
  }
  for (int e = 0; e < kNumEdges; ++e) {
    const std::string edge(kEdgeNames[e]);
    if (!edges.contains(edge)) fail(ErrorKind::Format, "genotype: missing edge " + edge);
    if (!edges[edge].is_string()) fail(ErrorKind::Format, "genotype: edge " + edge + " must name a kind");
    const auto kind = edges[edge].get<std::string>();
    int found = -1;
    for (int k = 0; k < kOpsPerSet; ++k)
      if (op_kind_name(kEdgeFamilies[e], k) == kind) found = k;
    if (found < 0) fail(ErrorKind::Format, "genotype: kind " + kind + " is not valid for edge " + edge);
    g.ops[e] = found;
  }
  return g;
}

inline Genotype load_genotype(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open genotype file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_genotype(ss.str());
}

inline void save_genotype(const Genotype& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write genotype file " + path);
  out << serialize_genotype(g) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed for " + path);
}

}  // namespace sase
