#include "csl/persistence.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <boost/crc.hpp>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "csl/csv.hpp"
#include "csl/error.hpp"
#include "csl/serialize.hpp"

namespace csl {

namespace fs = std::filesystem;

namespace {

std::uint32_t crc32_of(std::string_view text) {
  boost::crc_32_type crc;
  crc.process_bytes(text.data(), text.size());
  return crc.checksum();
}

std::string hex8(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

void write_all(int fd, std::string_view data) {
  const char* p = data.data();
  std::size_t left = data.size();
  while (left > 0) {
    ssize_t n = ::write(fd, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(Errc::storage_error, errno_text("write failed"));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
}

// Parses records starting at `base` within `text`; offsets are absolute.
void scan_records(std::string_view text, std::uint64_t base, std::uint64_t expect_seq, LogScan& out,
                  std::vector<std::uint64_t>* offsets) {
  std::size_t pos = 0;
  out.valid_bytes = base;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::uint64_t at = base + pos;
    if (nl == std::string_view::npos) {
      out.corruption = "truncated record at byte " + std::to_string(at) + " after seq " + std::to_string(expect_seq - 1);
      return;
    }
    std::string_view line = text.substr(pos, nl - pos);
    if (line.size() < 10 || line[8] != ' ') {
      out.corruption = "malformed record at byte " + std::to_string(at);
      return;
    }
    std::string_view body = line.substr(9);
    if (hex8(crc32_of(body)) != line.substr(0, 8)) {
      out.corruption = "checksum mismatch at byte " + std::to_string(at);
      return;
    }
    ActionEvent ev;
    try {
      ev = Json::parse(body).get<ActionEvent>();
    } catch (const std::exception& e) {
      out.corruption = "unparseable record at byte " + std::to_string(at) + ": " + e.what();
      return;
    }
    if (ev.seq != expect_seq) {
      out.corruption = "sequence gap at byte " + std::to_string(at) + ": expected " + std::to_string(expect_seq) +
                       ", found " + std::to_string(ev.seq);
      return;
    }
    if (offsets) offsets->push_back(at);
    out.events.push_back(std::move(ev));
    ++expect_seq;
    pos = nl + 1;
    out.valid_bytes = base + pos;
  }
}

std::string read_range(const fs::path& path, std::uint64_t offset) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  in.seekg(static_cast<std::streamoff>(offset));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::uint64_t MemoryEventStore::append(ActionEvent& event) {
  event.seq = last_seq() + 1;
  events_.push_back(event);
  return event.seq;
}

LogScan scan_event_log(const fs::path& path) {
  LogScan out;
  if (!fs::exists(path)) return out;
  scan_records(read_file(path), 0, 1, out, nullptr);
  return out;
}

FileEventLog::FileEventLog(fs::path path) : FileEventLog(std::move(path), Options{}) {}

FileEventLog::FileEventLog(fs::path path, Options options)
    : path_(std::move(path)), options_(options), last_sync_(std::chrono::steady_clock::now()) {
  index_path_ = path_;
  index_path_ += ".idx";
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());

  LogScan scan;
  std::vector<std::uint64_t> offsets;
  if (fs::exists(path_)) scan_records(read_file(path_), 0, 1, scan, &offsets);

  fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd_ < 0) fail(Errc::storage_error, errno_text("cannot open event log"));
  if (scan.corruption) {
    recovery_ = *scan.corruption;
    // Character devices (e.g. a simulated full disk) cannot be truncated.
    if (fs::is_regular_file(path_) && ::ftruncate(fd_, static_cast<off_t>(scan.valid_bytes)) != 0) {
      fail(Errc::storage_error, errno_text("cannot truncate corrupt tail"));
    }
  }
  size_ = scan.valid_bytes;
  last_seq_ = scan.events.empty() ? 0 : scan.events.back().seq;

  bool index_ok = false;
  if (fs::exists(index_path_) && fs::file_size(index_path_) == offsets.size() * sizeof(std::uint64_t)) {
    std::string raw = read_file(index_path_);
    index_ok = std::memcmp(raw.data(), offsets.data(), raw.size()) == 0;
  }
  if (!index_ok) rebuild_index(offsets);
  index_fd_ = ::open(index_path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (index_fd_ < 0) fail(Errc::storage_error, errno_text("cannot open event index"));
}

FileEventLog::~FileEventLog() {
  if (fd_ >= 0) {
    ::fsync(fd_);
    ::close(fd_);
  }
  if (index_fd_ >= 0) ::close(index_fd_);
}

void FileEventLog::rebuild_index(const std::vector<std::uint64_t>& offsets) {
  std::string raw(reinterpret_cast<const char*>(offsets.data()), offsets.size() * sizeof(std::uint64_t));
  write_file_atomic(index_path_, raw);
}

std::uint64_t FileEventLog::append(ActionEvent& event) {
  ActionEvent record = event;
  record.seq = last_seq_ + 1;
  std::string body = Json(record).dump();
  std::string line = hex8(crc32_of(body)) + " " + body + "\n";
  try {
    write_all(fd_, line);
  } catch (const Error&) {
    if (fs::is_regular_file(path_) && ::ftruncate(fd_, static_cast<off_t>(size_)) != 0) {
      // nothing more to undo; the open-time scan drops a partial record
    }
    throw;
  }
  std::uint64_t offset = size_;
  size_ += line.size();
  last_seq_ = record.seq;
  // A lost index entry is rebuilt on the next open.
  [[maybe_unused]] ssize_t n = ::write(index_fd_, &offset, sizeof offset);

  ++unsynced_;
  auto now = std::chrono::steady_clock::now();
  if (unsynced_ >= options_.fsync_every || now - last_sync_ >= options_.fsync_interval) sync();
  event.seq = record.seq;
  return record.seq;
}

void FileEventLog::sync() {
  if (fd_ >= 0) ::fdatasync(fd_);
  if (index_fd_ >= 0) ::fdatasync(index_fd_);
  unsynced_ = 0;
  last_sync_ = std::chrono::steady_clock::now();
}

std::vector<ActionEvent> FileEventLog::read_all() const {
  LogScan scan;
  scan_records(read_file(path_).substr(0, size_), 0, 1, scan, nullptr);
  return std::move(scan.events);
}

std::vector<ActionEvent> FileEventLog::read_from(std::uint64_t from) const {
  if (from == 0) from = 1;
  if (from > last_seq_) return {};
  std::uint64_t offset = 0;
  std::ifstream idx(index_path_, std::ios::binary);
  idx.seekg(static_cast<std::streamoff>((from - 1) * sizeof(std::uint64_t)));
  if (!idx.read(reinterpret_cast<char*>(&offset), sizeof offset)) return {};
  std::string tail = read_range(path_, offset);
  if (tail.size() > size_ - offset) tail.resize(size_ - offset);
  LogScan scan;
  scan_records(tail, offset, from, scan, nullptr);
  if (scan.corruption) fail(Errc::corrupt_record, *scan.corruption);
  return std::move(scan.events);
}

PersonalStore::PersonalStore(fs::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
}

void PersonalStore::put(const PersonalRecord& r) {
  Json j{{"anon_id", r.anon_id.value},
         {"survey", r.survey_id},
         {"question", r.question_id},
         {"value", r.value},
         {"server_ts", r.server_ts}};
  int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0600);
  if (fd < 0) fail(Errc::storage_error, errno_text("cannot open personal store"));
  try {
    write_all(fd, j.dump() + "\n");
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
}

std::vector<PersonalRecord> PersonalStore::all() const {
  std::vector<PersonalRecord> out;
  if (!fs::exists(path_)) return out;
  std::istringstream in(read_file(path_));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    out.push_back({AnonId{j.value("anon_id", "")}, j.value("survey", ""), j.value("question", ""), j.value("value", Json()),
                   j.value("server_ts", Millis{0})});
  }
  return out;
}

std::vector<PersonalRecord> PersonalStore::for_participant(const AnonId& id) const {
  std::vector<PersonalRecord> out;
  for (auto& r : all()) {
    if (r.anon_id == id) out.push_back(std::move(r));
  }
  return out;
}

std::size_t PersonalStore::erase(const AnonId& id) {
  std::size_t removed = 0;
  std::string kept;
  for (const auto& r : all()) {
    if (r.anon_id == id) {
      ++removed;
      continue;
    }
    kept += Json{{"anon_id", r.anon_id.value},
                 {"survey", r.survey_id},
                 {"question", r.question_id},
                 {"value", r.value},
                 {"server_ts", r.server_ts}}
                .dump() +
            "\n";
  }
  if (removed > 0) write_file_atomic(path_, kept);
  return removed;
}

void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) fail(Errc::storage_error, errno_text("cannot write temporary file"));
  try {
    write_all(fd, contents);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::fsync(fd);
  ::close(fd);
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::not_found, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

namespace {

csv::Row event_row(const ActionEvent& e, const std::string& anon) {
  return {std::to_string(e.seq),
          anon,
          std::to_string(e.stage),
          e.game_instance_id.value_or(""),
          e.game_family ? std::string(to_string(*e.game_family)) : "",
          e.round ? std::to_string(*e.round) : "",
          std::string(to_string(e.kind)),
          e.payload.dump(),
          std::to_string(e.server_ts),
          e.client_ts ? std::to_string(*e.client_ts) : "",
          e.synthetic ? "true" : "false"};
}

bool is_public_answer(const ActionEvent& e) {
  return e.kind == ActionKind::SurveyAnswer && e.payload.contains("value") && !e.payload.value("personal", false);
}

csv::Row survey_row(const ActionEvent& e, const std::string& anon) {
  return {std::to_string(e.seq),        anon,
          std::to_string(e.stage),      e.payload.value("survey", ""),
          e.payload.value("question", ""), e.payload.at("value").dump(),
          std::to_string(e.server_ts)};
}

std::vector<csv::Row> parse_with_header(std::string_view text, std::string_view header) {
  auto rows = csv::parse(text);
  if (rows.empty()) fail(Errc::corrupt_record, "missing CSV header");
  if (csv::format_row(rows.front()) != std::string(header) + "\n") {
    fail(Errc::corrupt_record, "unexpected CSV header");
  }
  rows.erase(rows.begin());
  return rows;
}

template <typename T>
T to_number(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(what);
    return static_cast<T>(v);
  } catch (const std::exception&) {
    fail(Errc::corrupt_record, std::string("bad ") + what + " '" + s + "'");
  }
}

}  // namespace

std::string events_to_csv(const std::vector<ActionEvent>& events) {
  std::string out = std::string(kEventsCsvHeader) + "\n";
  for (const auto& e : events) out += csv::format_row(event_row(e, e.anon_id.value));
  return out;
}

std::vector<ActionEvent> events_from_csv(std::string_view text) {
  std::vector<ActionEvent> out;
  for (const auto& row : parse_with_header(text, kEventsCsvHeader)) {
    if (row.size() != 11) fail(Errc::corrupt_record, "events row with " + std::to_string(row.size()) + " fields");
    ActionEvent e;
    e.seq = to_number<std::uint64_t>(row[0], "seq");
    e.anon_id = AnonId{row[1]};
    e.stage = to_number<std::size_t>(row[2], "stage");
    if (!row[3].empty()) e.game_instance_id = row[3];
    if (!row[4].empty()) {
      e.game_family = parse_family(row[4]);
      if (!e.game_family) fail(Errc::corrupt_record, "bad game_family '" + row[4] + "'");
    }
    if (!row[5].empty()) e.round = to_number<int>(row[5], "round");
    auto kind = parse_action_kind(row[6]);
    if (!kind) fail(Errc::corrupt_record, "bad kind '" + row[6] + "'");
    e.kind = *kind;
    e.payload = Json::parse(row[7], nullptr, false);
    if (e.payload.is_discarded()) fail(Errc::corrupt_record, "bad payload_json in seq " + row[0]);
    e.server_ts = to_number<Millis>(row[8], "server_ts");
    if (!row[9].empty()) e.client_ts = to_number<Millis>(row[9], "client_ts");
    if (row[10] != "true" && row[10] != "false") fail(Errc::corrupt_record, "bad synthetic flag");
    e.synthetic = row[10] == "true";
    out.push_back(std::move(e));
  }
  return out;
}

std::string surveys_to_csv(const std::vector<ActionEvent>& events) {
  std::string out = std::string(kSurveysCsvHeader) + "\n";
  for (const auto& e : events) {
    if (is_public_answer(e)) out += csv::format_row(survey_row(e, e.anon_id.value));
  }
  return out;
}

std::vector<SurveyRow> surveys_from_csv(std::string_view text) {
  std::vector<SurveyRow> out;
  for (const auto& row : parse_with_header(text, kSurveysCsvHeader)) {
    if (row.size() != 7) fail(Errc::corrupt_record, "surveys row with " + std::to_string(row.size()) + " fields");
    SurveyRow r;
    r.seq = to_number<std::uint64_t>(row[0], "seq");
    r.anon_id = AnonId{row[1]};
    r.stage = to_number<std::size_t>(row[2], "stage");
    r.survey_id = row[3];
    r.question_id = row[4];
    r.answer = Json::parse(row[5], nullptr, false);
    if (r.answer.is_discarded()) fail(Errc::corrupt_record, "bad answer_json in seq " + row[0]);
    r.server_ts = to_number<Millis>(row[6], "server_ts");
    out.push_back(std::move(r));
  }
  return out;
}

AnonymizedBundle make_anonymized_bundle(const ExperimentDefinition& def, const std::vector<ActionEvent>& events,
                                        std::mt19937_64& rng) {
  std::map<AnonId, std::string> mapping;
  auto mapped = [&](const AnonId& id) -> const std::string& {
    auto it = mapping.find(id);
    if (it == mapping.end()) it = mapping.emplace(id, random_anon_id(rng).value).first;
    return it->second;
  };
  AnonymizedBundle bundle;
  bundle.experiment = def;
  bundle.events_csv = std::string(kEventsCsvHeader) + "\n";
  bundle.surveys_csv = std::string(kSurveysCsvHeader) + "\n";
  for (const auto& e : events) {
    bundle.events_csv += csv::format_row(event_row(e, mapped(e.anon_id)));
    if (is_public_answer(e)) bundle.surveys_csv += csv::format_row(survey_row(e, mapped(e.anon_id)));
  }
  return bundle;
}

}  // namespace csl
