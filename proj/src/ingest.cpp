// SPDX-License-Identifier: Apache-2.0
#include "resus/ingest.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

namespace resus {

namespace {

std::vector<std::string> split_double_colon(const std::string& line) {
  std::vector<std::string> out;
  std::size_t at = 0;
  while (true) {
    const std::size_t next = line.find("::", at);
    if (next == std::string::npos) {
      out.push_back(line.substr(at));
      return out;
    }
    out.push_back(line.substr(at, next - at));
    at = next + 2;
  }
}

std::string strip_cr(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
  return s;
}

long parse_long(const std::string& s, const std::string& file, long line_no) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(file + ":" + std::to_string(line_no) + ": expected an integer, got '" + s + "'");
  }
}

// "Toy Story (1995)" -> "1995"; missing/malformed year becomes "unknown".
std::string release_year(const std::string& title) {
  const std::size_t close = title.rfind(')');
  if (close == std::string::npos) return "unknown";
  const std::size_t open = title.rfind('(', close);
  if (open == std::string::npos || close - open != 5) return "unknown";
  const std::string year = title.substr(open + 1, 4);
  for (char c : year)
    if (c < '0' || c > '9') return "unknown";
  return year;
}

std::string primary_genre(const std::string& genres) {
  const std::size_t bar = genres.find('|');
  return bar == std::string::npos ? genres : genres.substr(0, bar);
}

}  // namespace

RawDataset parse_movielens(const std::string& dir, int rating_threshold) {
  const std::string ratings_path = dir + "/ratings.dat";
  const std::string users_path = dir + "/users.dat";
  const std::string movies_path = dir + "/movies.dat";

  struct UserMeta {
    std::string gender, age, occupation;
  };
  struct MovieMeta {
    std::string genre, year;
  };
  std::unordered_map<std::string, UserMeta> users;
  std::unordered_map<std::string, MovieMeta> movies;

  {
    std::ifstream is(users_path);
    if (!is) throw DataError("cannot open " + users_path);
    std::string line;
    long line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      line = strip_cr(line);
      if (line.empty()) continue;
      const auto f = split_double_colon(line);
      if (f.size() < 4) throw DataError(users_path + ":" + std::to_string(line_no) + ": malformed line");
      users[f[0]] = UserMeta{f[1], f[2], f[3]};
    }
  }
  {
    std::ifstream is(movies_path);
    if (!is) throw DataError("cannot open " + movies_path);
    std::string line;
    long line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      line = strip_cr(line);
      if (line.empty()) continue;
      const auto f = split_double_colon(line);
      if (f.size() < 3) throw DataError(movies_path + ":" + std::to_string(line_no) + ": malformed line");
      movies[f[0]] = MovieMeta{primary_genre(f[2]), release_year(f[1])};
    }
  }

  RawDataset raw;
  raw.field_names = {"user_id", "age", "gender", "occupation", "movie_id", "genre", "release_year"};
  raw.user_field = 0;
  raw.item_field = 4;

  std::ifstream is(ratings_path);
  if (!is) throw DataError("cannot open " + ratings_path);
  std::string line;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_double_colon(line);
    if (f.size() != 4) throw DataError(ratings_path + ":" + std::to_string(line_no) + ": malformed line");
    const auto user_it = users.find(f[0]);
    if (user_it == users.end())
      throw DataError(ratings_path + ":" + std::to_string(line_no) + ": unknown user " + f[0]);
    const auto movie_it = movies.find(f[1]);
    if (movie_it == movies.end())
      throw DataError(ratings_path + ":" + std::to_string(line_no) + ": unknown movie " + f[1]);
    const long rating = parse_long(f[2], ratings_path, line_no);
    RawRecord rec;
    rec.tokens = {f[0],          user_it->second.age,   user_it->second.gender, user_it->second.occupation,
                  f[1],          movie_it->second.genre, movie_it->second.year};
    rec.label = rating >= rating_threshold ? 1 : 0;
    rec.timestamp = parse_long(f[3], ratings_path, line_no);
    raw.records.push_back(std::move(rec));
  }
  return raw;
}

RawDataset parse_tabular(const std::string& file, const IngestConfig& cfg) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open " + file);
  std::string line;
  if (!std::getline(is, line)) throw DataError(file + ": empty file");
  line = strip_cr(line);

  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, cfg.delimiter)) header.push_back(col);
  }
  auto col_of = [&](const std::string& name, bool required) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    if (required) throw ConfigError(file + ": missing column '" + name + "'");
    return -1;
  };
  const int user_c = col_of(cfg.user_col, true);
  const int label_c = col_of(cfg.label_col, true);
  const int time_c = cfg.time_col.empty() ? -1 : col_of(cfg.time_col, true);
  const int item_c = cfg.item_col.empty() ? -1 : col_of(cfg.item_col, false);

  RawDataset raw;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (static_cast<int>(i) == label_c || static_cast<int>(i) == time_c) continue;
    if (static_cast<int>(i) == user_c) raw.user_field = static_cast<int>(raw.field_names.size());
    if (static_cast<int>(i) == item_c) raw.item_field = static_cast<int>(raw.field_names.size());
    raw.field_names.push_back(header[i]);
  }

  long line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    std::vector<std::string> cells;
    {
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, cfg.delimiter)) cells.push_back(cell);
    }
    while (cells.size() < header.size()) cells.push_back("");  // trailing empty cells
    if (cells.size() != header.size())
      throw DataError(file + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " columns, got " + std::to_string(cells.size()));
    RawRecord rec;
    const std::string& lab = cells[static_cast<std::size_t>(label_c)];
    if (lab == "1")
      rec.label = 1;
    else if (lab == "0" || lab == "-1")
      rec.label = 0;
    else
      throw DataError(file + ":" + std::to_string(line_no) + ": label must be 0/1/-1, got '" + lab + "'");
    if (time_c >= 0) rec.timestamp = parse_long(cells[static_cast<std::size_t>(time_c)], file, line_no);
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (static_cast<int>(i) == label_c || static_cast<int>(i) == time_c) continue;
      rec.tokens.push_back(cells[i]);
    }
    raw.records.push_back(std::move(rec));
  }
  return raw;
}

void filter_cold_items(RawDataset& raw, int min_count) {
  if (raw.item_field < 0) return;
  std::unordered_map<std::string, int> counts;
  for (const auto& rec : raw.records) ++counts[rec.tokens[static_cast<std::size_t>(raw.item_field)]];
  std::vector<RawRecord> kept;
  kept.reserve(raw.records.size());
  for (auto& rec : raw.records)
    if (counts[rec.tokens[static_cast<std::size_t>(raw.item_field)]] >= min_count) kept.push_back(std::move(rec));
  raw.records = std::move(kept);
}

SplitAssignment split_users(const std::vector<std::string>& user_ids, const std::array<double, 3>& ratio,
                            uint64_t seed) {
  if (user_ids.size() < 10) throw ConfigError("split_users: need at least 10 users");
  for (double r : ratio)
    if (!(r > 0.0)) throw ConfigError("split_users: ratio weights must be positive");

  std::vector<std::string> ids = user_ids;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(seed);
  shuffle(ids, rng);

  const double total = ratio[0] + ratio[1] + ratio[2];
  const auto n = static_cast<double>(ids.size());
  std::array<int, 3> counts{};
  std::array<double, 3> frac{};
  int assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double target = n * ratio[static_cast<std::size_t>(s)] / total;
    counts[static_cast<std::size_t>(s)] = static_cast<int>(target);
    frac[static_cast<std::size_t>(s)] = target - counts[static_cast<std::size_t>(s)];
    assigned += counts[static_cast<std::size_t>(s)];
  }
  while (assigned < static_cast<int>(ids.size())) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (frac[static_cast<std::size_t>(s)] > frac[static_cast<std::size_t>(best)]) best = s;
    ++counts[static_cast<std::size_t>(best)];
    frac[static_cast<std::size_t>(best)] = -1.0;
    ++assigned;
  }

  SplitAssignment out;
  out.counts = counts;
  std::size_t at = 0;
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < counts[static_cast<std::size_t>(s)]; ++i) out.by_user[ids[at++]] = static_cast<Split>(s);
  return out;
}

FeatureSpace build_feature_space(const RawDataset& raw, const std::function<bool(const std::string&)>& include_user) {
  FeatureSpace space;
  for (std::size_t f = 0; f < raw.field_names.size(); ++f) {
    FieldSchema field;
    field.name = raw.field_names[f];
    field.is_user_id = static_cast<int>(f) == raw.user_field;
    space.fields.push_back(std::move(field));
  }
  for (const auto& rec : raw.records) {
    if (!include_user(rec.tokens[static_cast<std::size_t>(raw.user_field)])) continue;
    for (std::size_t f = 0; f < rec.tokens.size(); ++f) space.fields[f].add(rec.tokens[f]);
  }
  return space;
}

Bundle ingest_dataset(const IngestConfig& cfg) {
  RawDataset raw;
  if (cfg.format == "movielens")
    raw = parse_movielens(cfg.path, cfg.rating_threshold);
  else if (cfg.format == "tabular")
    raw = parse_tabular(cfg.path, cfg);
  else
    throw ConfigError("unknown dataset format: " + cfg.format);

  auto count_distinct = [&](int field) {
    std::unordered_map<std::string, int> seen;
    for (const auto& rec : raw.records) ++seen[rec.tokens[static_cast<std::size_t>(field)]];
    return static_cast<long>(seen.size());
  };
  const long users_before = count_distinct(raw.user_field);
  const long items_before = raw.item_field >= 0 ? count_distinct(raw.item_field) : 0;
  const long instances_before = static_cast<long>(raw.records.size());

  filter_cold_items(raw, cfg.min_item_interactions);

  const long users_after = count_distinct(raw.user_field);
  const long items_after = raw.item_field >= 0 ? count_distinct(raw.item_field) : 0;
  const long instances_after = static_cast<long>(raw.records.size());
  if (instances_after == 0) throw DataError("ingest: no instances survive the item-interaction filter");

  // split over surviving users, first-appearance order for log assembly
  std::vector<std::string> user_order;
  {
    std::unordered_map<std::string, bool> seen;
    for (const auto& rec : raw.records) {
      const std::string& u = rec.tokens[static_cast<std::size_t>(raw.user_field)];
      if (!seen[u]) {
        seen[u] = true;
        user_order.push_back(u);
      }
    }
  }
  Bundle bundle;
  bundle.split = split_users(user_order, cfg.split_ratio, cfg.seed);
  bundle.space = build_feature_space(
      raw, [&](const std::string& u) { return bundle.split.by_user.at(u) == Split::Train; });

  std::unordered_map<std::string, std::size_t> log_of;
  for (const auto& u : user_order) {
    log_of[u] = bundle.logs.size();
    bundle.logs.push_back(UserLog{u, {}});
  }
  for (const auto& rec : raw.records) {
    Instance inst;
    inst.field_indices.reserve(rec.tokens.size());
    for (std::size_t f = 0; f < rec.tokens.size(); ++f)
      inst.field_indices.push_back(bundle.space.fields[f].index_of(rec.tokens[f]));
    inst.label = rec.label;
    inst.timestamp = rec.timestamp;
    bundle.logs[log_of[rec.tokens[static_cast<std::size_t>(raw.user_field)]]].instances.push_back(std::move(inst));
  }
  for (auto& log : bundle.logs) log.normalize();

  nlohmann::ordered_json m;
  m["format"] = cfg.format;
  m["path"] = cfg.path;
  m["rating_threshold"] = cfg.rating_threshold;
  m["min_item_interactions"] = cfg.min_item_interactions;
  m["split_ratio"] = {cfg.split_ratio[0], cfg.split_ratio[1], cfg.split_ratio[2]};
  m["seed"] = cfg.seed;
  m["users_before_filter"] = users_before;
  m["users_after_filter"] = users_after;
  m["items_before_filter"] = items_before;
  m["items_after_filter"] = items_after;
  m["instances_before_filter"] = instances_before;
  m["instances_after_filter"] = instances_after;
  if (users_before > 0 && items_before > 0)
    m["sparsity_before_filter"] =
        1.0 - static_cast<double>(instances_before) / (static_cast<double>(users_before) * static_cast<double>(items_before));
  if (users_after > 0 && items_after > 0)
    m["sparsity_after_filter"] =
        1.0 - static_cast<double>(instances_after) / (static_cast<double>(users_after) * static_cast<double>(items_after));
  m["num_fields"] = bundle.space.field_count();
  nlohmann::ordered_json fields = nlohmann::ordered_json::array();
  for (const auto& f : bundle.space.fields) {
    nlohmann::ordered_json jf;
    jf["name"] = f.name;
    jf["is_user_id"] = f.is_user_id;
    jf["distinct_tokens"] = f.distinct();
    jf["vocab_size_with_oov"] = f.size();
    fields.push_back(std::move(jf));
  }
  m["fields"] = std::move(fields);
  m["num_features"] = bundle.space.total_features();
  m["num_features_with_oov"] = bundle.space.total_features_with_oov();
  m["split_counts"] = {bundle.split.counts[0], bundle.split.counts[1], bundle.split.counts[2]};
  bundle.manifest = std::move(m);
  return bundle;
}

namespace {

constexpr char kBundleMagic[9] = "RESUSBN1";

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<long>(s.size()));
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
int64_t read_i64(std::istream& is) {
  int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
std::string read_str(std::istream& is) {
  std::string s(read_u32(is), '\0');
  is.read(s.data(), static_cast<long>(s.size()));
  return s;
}

}  // namespace

void write_bundle(const std::string& path, const Bundle& bundle) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write bundle: " + path);
  os.write(kBundleMagic, 8);
  write_u32(os, static_cast<uint32_t>(bundle.space.field_count()));
  for (const auto& f : bundle.space.fields) {
    write_str(os, f.name);
    os.put(f.is_user_id ? 1 : 0);
    write_u32(os, static_cast<uint32_t>(f.tokens.size()));
    for (const auto& t : f.tokens) write_str(os, t);
  }
  write_u32(os, static_cast<uint32_t>(bundle.logs.size()));
  for (const auto& log : bundle.logs) {
    write_str(os, log.user_id);
    os.put(static_cast<char>(bundle.split.by_user.at(log.user_id)));
    write_u32(os, static_cast<uint32_t>(log.instances.size()));
    for (const auto& inst : log.instances) {
      for (int32_t idx : inst.field_indices) write_u32(os, static_cast<uint32_t>(idx));
      os.put(static_cast<char>(inst.label));
      os.put(inst.timestamp ? 1 : 0);
      if (inst.timestamp) write_i64(os, *inst.timestamp);
    }
  }
  write_str(os, bundle.manifest.dump());
  if (!os) throw DataError("short write on bundle: " + path);
}

Bundle read_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open bundle: " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::memcmp(magic, kBundleMagic, 8) != 0) throw DataError("not a dataset bundle: " + path);
  Bundle bundle;
  const uint32_t nfields = read_u32(is);
  for (uint32_t f = 0; f < nfields; ++f) {
    FieldSchema field;
    field.name = read_str(is);
    field.is_user_id = is.get() != 0;
    const uint32_t ntokens = read_u32(is);
    for (uint32_t t = 0; t < ntokens; ++t) field.add(read_str(is));
    bundle.space.fields.push_back(std::move(field));
  }
  const uint32_t nusers = read_u32(is);
  for (uint32_t u = 0; u < nusers; ++u) {
    UserLog log;
    log.user_id = read_str(is);
    const auto split = static_cast<Split>(is.get());
    bundle.split.by_user[log.user_id] = split;
    ++bundle.split.counts[static_cast<std::size_t>(split)];
    const uint32_t ninst = read_u32(is);
    for (uint32_t i = 0; i < ninst; ++i) {
      Instance inst;
      inst.field_indices.resize(nfields);
      for (uint32_t f = 0; f < nfields; ++f) inst.field_indices[f] = static_cast<int32_t>(read_u32(is));
      inst.label = static_cast<uint8_t>(is.get());
      if (is.get() != 0) inst.timestamp = read_i64(is);
      log.instances.push_back(std::move(inst));
    }
    bundle.logs.push_back(std::move(log));
  }
  bundle.manifest = nlohmann::ordered_json::parse(read_str(is));
  if (!is) throw DataError("truncated bundle: " + path);
  return bundle;
}

std::vector<UserLog> split_logs(const Bundle& bundle, Split split) {
  std::vector<UserLog> out;
  for (const auto& log : bundle.logs)
    if (bundle.split.by_user.at(log.user_id) == split) out.push_back(log);
  return out;
}

std::vector<Instance> split_instances(const Bundle& bundle, Split split) {
  std::vector<Instance> out;
  for (const auto& log : bundle.logs)
    if (bundle.split.by_user.at(log.user_id) == split)
      out.insert(out.end(), log.instances.begin(), log.instances.end());
  return out;
}

}  // namespace resus
