#include "chprune/graph_io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "chprune/error.hpp"

namespace chprune {

namespace {

constexpr const char* kHeader = "chprune-graph 1";

bool is_token_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.' || c == ':' || c == '/';
}

std::string escape(const std::string& s) {
  std::ostringstream os;
  for (char c : s) {
    if (is_token_char(c) && c != '%') {
      os << c;
    } else {
      os << '%' << std::uppercase << std::hex << std::setw(2) << std::setfill('0')
         << static_cast<int>(static_cast<unsigned char>(c)) << std::dec;
    }
  }
  return os.str();
}

std::string join_extents(const std::vector<int64_t>& v) {
  if (v.empty()) return "-";
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "x" : "") + std::to_string(v[i]);
  return out;
}

std::string join_ids(const std::vector<NodeId>& v) {
  if (v.empty()) return "-";
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

struct Field {
  std::string key;
  std::string value;
};

struct LineContext {
  size_t line;
  [[noreturn]] void error(const std::string& field, const std::string& what) const {
    throw Error(ErrorCode::ParseError,
                "line " + std::to_string(line) + (field.empty() ? "" : ", field '" + field + "'") + ": " + what);
  }
};

int64_t parse_int(const LineContext& ctx, const Field& f) {
  int64_t v = 0;
  auto [ptr, ec] = std::from_chars(f.value.data(), f.value.data() + f.value.size(), v);
  if (ec != std::errc() || ptr != f.value.data() + f.value.size()) ctx.error(f.key, "expected an integer, got '" + f.value + "'");
  return v;
}

std::vector<int64_t> parse_extents(const LineContext& ctx, const Field& f) {
  std::vector<int64_t> out;
  if (f.value == "-") return out;
  std::stringstream ss(f.value);
  std::string part;
  while (std::getline(ss, part, 'x')) out.push_back(parse_int(ctx, Field{f.key, part}));
  return out;
}

std::string unescape(const LineContext& ctx, const Field& f) {
  std::string out;
  for (size_t i = 0; i < f.value.size(); ++i) {
    if (f.value[i] == '%') {
      if (i + 2 >= f.value.size()) ctx.error(f.key, "truncated escape");
      int code = 0;
      auto [ptr, ec] = std::from_chars(f.value.data() + i + 1, f.value.data() + i + 3, code, 16);
      if (ec != std::errc() || ptr != f.value.data() + i + 3) ctx.error(f.key, "bad escape");
      out += static_cast<char>(code);
      i += 2;
    } else {
      out += f.value[i];
    }
  }
  return out;
}

}  // namespace

std::string serialize_graph(const Graph& graph) {
  std::vector<const OperatorNode*> nodes;
  for (const auto& n : graph.nodes()) nodes.push_back(&n);
  std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->id < b->id; });

  std::ostringstream os;
  os << kHeader << "\n";
  for (const auto* n : nodes) {
    os << "node id=" << n->id << " kind=";
    if (n->kind == OpKind::Unknown && std::holds_alternative<UnknownAttrs>(n->attrs))
      os << escape(std::get<UnknownAttrs>(n->attrs).kind_name);
    else
      os << kind_name(n->kind);
    std::visit(
        [&](const auto& a) {
          using A = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<A, InputAttrs>) {
            os << " channels=" << a.channels << " spatial=" << join_extents(a.spatial);
          } else if constexpr (std::is_same_v<A, ConvAttrs>) {
            os << " in_channels=" << a.in_channels << " out_channels=" << a.out_channels
               << " kernel=" << join_extents(a.kernel) << " stride=" << a.stride << " padding=" << a.padding
               << " bias=" << (a.bias ? 1 : 0);
          } else if constexpr (std::is_same_v<A, FcAttrs>) {
            os << " in_channels=" << a.in_channels << " out_channels=" << a.out_channels;
          } else if constexpr (std::is_same_v<A, ResampleAttrs>) {
            os << " factor=" << a.factor;
          } else if constexpr (std::is_same_v<A, UnknownAttrs>) {
            for (const auto& [k, v] : a.values) os << " attr." << escape(k) << "=" << escape(v);
          }
        },
        n->attrs);
    os << " inputs=" << join_ids(n->inputs) << "\n";
  }
  return os.str();
}

Graph deserialize_graph(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  bool header = false;
  std::vector<OperatorNode> nodes;
  while (std::getline(in, line)) {
    ++lineno;
    LineContext ctx{lineno};
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    if (!header) {
      if (line != kHeader) ctx.error("", "expected header '" + std::string(kHeader) + "'");
      header = true;
      continue;
    }
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word != "node") ctx.error("", "expected a 'node' record, got '" + word + "'");

    std::vector<Field> fields;
    while (ls >> word) {
      auto eq = word.find('=');
      if (eq == std::string::npos || eq == 0) ctx.error(word, "expected key=value");
      fields.push_back(Field{word.substr(0, eq), word.substr(eq + 1)});
    }
    auto take = [&](const std::string& key) -> Field {
      auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return f.key == key; });
      if (it == fields.end()) ctx.error(key, "missing field");
      Field f = *it;
      fields.erase(it);
      return f;
    };

    OperatorNode node;
    node.id = take("id").value;
    if (node.id.empty() || !std::all_of(node.id.begin(), node.id.end(), is_token_char))
      ctx.error("id", "invalid node id '" + node.id + "'");
    Field kind = take("kind");
    std::string kind_text = unescape(ctx, kind);
    node.kind = kind_from_name(kind_text);

    switch (node.kind) {
      case OpKind::Input:
        node.attrs = InputAttrs{parse_int(ctx, take("channels")), parse_extents(ctx, take("spatial"))};
        break;
      case OpKind::Convolution: {
        ConvAttrs a;
        a.in_channels = parse_int(ctx, take("in_channels"));
        a.out_channels = parse_int(ctx, take("out_channels"));
        a.kernel = parse_extents(ctx, take("kernel"));
        a.stride = parse_int(ctx, take("stride"));
        a.padding = parse_int(ctx, take("padding"));
        Field bias = take("bias");
        int64_t b = parse_int(ctx, bias);
        if (b != 0 && b != 1) ctx.error("bias", "expected 0 or 1");
        a.bias = b == 1;
        node.attrs = a;
        break;
      }
      case OpKind::FullyConnected:
        node.attrs = FcAttrs{parse_int(ctx, take("in_channels")), parse_int(ctx, take("out_channels"))};
        break;
      case OpKind::MaxPool:
      case OpKind::Upsample:
        node.attrs = ResampleAttrs{parse_int(ctx, take("factor"))};
        break;
      case OpKind::Unknown: {
        UnknownAttrs a{kind_text, {}};
        for (auto it = fields.begin(); it != fields.end();) {
          if (it->key.rfind("attr.", 0) == 0) {
            a.values[unescape(ctx, Field{it->key, it->key.substr(5)})] = unescape(ctx, *it);
            it = fields.erase(it);
          } else {
            ++it;
          }
        }
        node.attrs = a;
        break;
      }
      default:
        node.attrs = std::monostate{};
        break;
    }

    Field inputs = take("inputs");
    if (inputs.value != "-") {
      std::stringstream ss(inputs.value);
      std::string id;
      while (std::getline(ss, id, ',')) {
        if (id.empty()) ctx.error("inputs", "empty input id");
        node.inputs.push_back(id);
      }
    }
    if (!fields.empty()) ctx.error(fields.front().key, "unexpected field for kind " + kind_text);
    nodes.push_back(std::move(node));
  }
  if (!header) throw Error(ErrorCode::ParseError, "line 1: missing header");
  return Graph(std::move(nodes));
}

Graph load_graph(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::MissingFile, path);
  std::stringstream ss;
  ss << f.rdbuf();
  return deserialize_graph(ss.str());
}

void save_graph(const Graph& graph, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  f << serialize_graph(graph);
  if (!f) throw Error(ErrorCode::IoFailure, "cannot write " + path);
}

}  // namespace chprune
