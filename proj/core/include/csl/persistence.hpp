#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "csl/model.hpp"

namespace csl {

// Append-only sink for a session's ActionEvents. append() assigns the next
// dense seq and returns only once the record is in the file; failures throw
// Error(storage_error) and leave the log unchanged.
class EventStore {
 public:
  virtual ~EventStore() = default;
  virtual std::uint64_t append(ActionEvent& event) = 0;
  virtual std::vector<ActionEvent> read_all() const = 0;
  virtual std::uint64_t last_seq() const = 0;
};

class MemoryEventStore final : public EventStore {
 public:
  std::uint64_t append(ActionEvent& event) override;
  std::vector<ActionEvent> read_all() const override { return events_; }
  std::uint64_t last_seq() const override { return events_.empty() ? 0 : events_.back().seq; }

 private:
  std::vector<ActionEvent> events_;
};

struct LogScan {
  std::vector<ActionEvent> events;
  std::uint64_t valid_bytes = 0;
  std::optional<std::string> corruption;  // why the scan stopped early
};

// Reads a log file up to the first bad record. A missing file is empty.
LogScan scan_event_log(const std::filesystem::path& path);

// One record per line: 8 hex digits of CRC-32 over the JSON, a space, the
// JSON-encoded event. A sidecar index holds the byte offset of every record.
class FileEventLog final : public EventStore {
 public:
  struct Options {
    std::size_t fsync_every = 64;
    std::chrono::milliseconds fsync_interval{1000};
  };

  // Opens (creating if needed). A torn or corrupt tail is cut off and
  // reported via recovery_report().
  explicit FileEventLog(std::filesystem::path path);
  FileEventLog(std::filesystem::path path, Options options);
  ~FileEventLog() override;
  FileEventLog(const FileEventLog&) = delete;
  FileEventLog& operator=(const FileEventLog&) = delete;

  std::uint64_t append(ActionEvent& event) override;
  std::vector<ActionEvent> read_all() const override;
  std::uint64_t last_seq() const override { return last_seq_; }

  // Events with seq >= from, located through the index.
  std::vector<ActionEvent> read_from(std::uint64_t from) const;
  void sync();
  const std::optional<std::string>& recovery_report() const noexcept { return recovery_; }
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  void rebuild_index(const std::vector<std::uint64_t>& offsets);

  std::filesystem::path path_;
  std::filesystem::path index_path_;
  Options options_;
  int fd_ = -1;
  int index_fd_ = -1;
  std::uint64_t size_ = 0;
  std::uint64_t last_seq_ = 0;
  std::size_t unsynced_ = 0;
  std::chrono::steady_clock::time_point last_sync_;
  std::optional<std::string> recovery_;
};

struct PersonalRecord {
  AnonId anon_id;
  std::string survey_id;
  std::string question_id;
  Json value;
  Millis server_ts = 0;
};

// Personal-flagged survey answers, kept in their own file so the event log
// never holds them. Erasure rewrites this file only.
class PersonalStore {
 public:
  explicit PersonalStore(std::filesystem::path path);

  void put(const PersonalRecord& record);
  std::vector<PersonalRecord> all() const;
  std::vector<PersonalRecord> for_participant(const AnonId& id) const;
  std::size_t erase(const AnonId& id);
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

// Files of one session under the data directory.
struct SessionPaths {
  std::filesystem::path dir;

  std::filesystem::path events() const { return dir / "events.log"; }
  std::filesystem::path personal() const { return dir / "personal.store"; }
  std::filesystem::path meta() const { return dir / "session.json"; }
  std::filesystem::path audit() const { return dir / "audit.log"; }
  std::filesystem::path exports() const { return dir / "exports"; }
};

// Writes via a temporary file and rename so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

inline constexpr std::string_view kEventsCsvHeader =
    "seq,anon_id,stage,game_instance_id,game_family,round,kind,payload_json,server_ts,client_ts,synthetic";
inline constexpr std::string_view kSurveysCsvHeader = "seq,anon_id,stage,survey_id,question_id,answer_json,server_ts";

std::string events_to_csv(const std::vector<ActionEvent>& events);
std::vector<ActionEvent> events_from_csv(std::string_view text);  // throws corrupt_record

// Non-personal survey answers only.
std::string surveys_to_csv(const std::vector<ActionEvent>& events);

struct SurveyRow {
  std::uint64_t seq = 0;
  AnonId anon_id;
  std::size_t stage = 0;
  std::string survey_id;
  std::string question_id;
  Json answer;
  Millis server_ts = 0;
};
std::vector<SurveyRow> surveys_from_csv(std::string_view text);

struct AnonymizedBundle {
  Json experiment;
  std::string events_csv;
  std::string surveys_csv;
};

// Replaces every anon_id by a fresh random id under a bundle-local mapping.
AnonymizedBundle make_anonymized_bundle(const ExperimentDefinition& def, const std::vector<ActionEvent>& events,
                                        std::mt19937_64& rng);


}  // namespace csl
