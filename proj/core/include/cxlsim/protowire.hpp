// Protobuf wire-format subset: base-128 varints, fixed32/fixed64 and
// length-delimited fields, nested messages. Decoding is strict: unknown,
// duplicate or mistyped fields are errors.

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cxlsim::wire {

enum class WireType : std::uint8_t {
  Varint = 0,
  Fixed64 = 1,
  LengthDelimited = 2,
  Fixed32 = 5,
};

enum class FieldKind : std::uint8_t { Scalar, Bytes, Nested };

struct FieldSpec {
  std::uint32_t number = 1;
  WireType wire = WireType::Varint;
  FieldKind kind = FieldKind::Scalar;
  /// Index of the nested message type (kind == Nested only).
  std::uint32_t nested_type = 0;
};

struct MessageType {
  std::string name;
  std::vector<FieldSpec> fields;  // ascending field number

  const FieldSpec* find(std::uint32_t number) const;
  /// Position of the field in `fields`, or -1.
  int index_of(std::uint32_t number) const;
};

/// Message-type metadata: the "schema table".
struct RpcSchema {
  std::vector<MessageType> types;
  std::uint32_t root = 0;
  std::uint32_t max_depth = 16;

  /// Unique field numbers, consistent wire types, acyclic nesting.
  void validate() const;
  /// Longest chain of nested types starting at `type` (1 = no nesting).
  std::uint32_t nesting_depth(std::uint32_t type) const;
};

struct Message;

struct Field {
  std::uint32_t number = 0;
  std::uint64_t u = 0;         // varint / fixed64 / fixed32 payload
  std::string bytes;           // string/bytes payload
  std::vector<Message> sub;    // nested payload (exactly one element)
};

struct Message {
  std::uint32_t type = 0;
  std::vector<Field> fields;   // ascending field number
};

bool operator==(const Field& a, const Field& b);
bool operator==(const Message& a, const Message& b);

struct WireBuffer {
  std::vector<std::uint8_t> bytes;
  bool operator==(const WireBuffer&) const = default;
  std::size_t size() const { return bytes.size(); }
};

class DecodeError : public std::runtime_error {
 public:
  enum class Kind : std::uint8_t {
    MalformedVarint,
    Truncated,
    WireTypeMismatch,
    UnknownField,
    DuplicateField,
    DepthExceeded,
    BadWireType,
  };
  DecodeError(Kind kind, std::size_t offset, const std::string& what);
  Kind kind() const { return kind_; }
  std::size_t offset() const { return offset_; }

 private:
  Kind kind_;
  std::size_t offset_;
};

class EncodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- varints ---------------------------------------------------------------

void varint_encode(std::uint64_t v, std::vector<std::uint8_t>& out);
std::vector<std::uint8_t> varint_encode(std::uint64_t v);
std::size_t varint_size(std::uint64_t v);

struct VarintResult {
  std::uint64_t value;
  std::size_t consumed;
};
/// Throws DecodeError(MalformedVarint) after 10 bytes without a terminator,
/// DecodeError(Truncated) if the input ends mid-varint.
VarintResult varint_decode(std::span<const std::uint8_t> in, std::size_t base_offset = 0);

// --- messages --------------------------------------------------------------

WireBuffer encode_message(const Message& m, const RpcSchema& schema);
std::size_t encoded_size(const Message& m, const RpcSchema& schema);
Message decode_message(const WireBuffer& w, const RpcSchema& schema);
Message decode_message(std::span<const std::uint8_t> bytes, const RpcSchema& schema,
                       std::uint32_t type);

/// Field-level decode events in wire order, used by the hardware
/// deserializer models to time per-field work.
struct DecodeEvent {
  enum class Kind : std::uint8_t { Scalar, Bytes, BeginNested, EndNested };
  Kind kind;
  std::uint32_t type;       // message type the field belongs to
  std::uint32_t field_index;
  std::uint32_t depth;
  std::size_t wire_bytes;   // bytes of wire consumed by this field's key+payload
  std::size_t payload_bytes;
};
std::vector<DecodeEvent> decode_events(const WireBuffer& w, const RpcSchema& schema);

/// Maximum nesting depth present in a message (1 = flat).
std::uint32_t message_depth(const Message& m);
/// Total number of fields, nested fields included.
std::size_t field_count(const Message& m);

}  // namespace cxlsim::wire
