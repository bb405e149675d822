#pragma once

// Tensor-network machine-learning models built on the node/edge graph and the
// cached network operations: matrix product states (with and without an output
// site), matrix product operators, their uniform (weight-shared) variants, and
// tree tensor networks, plus the feature embeddings that lift raw samples into
// the product-state form the models contract against.
//
// All models follow the same data protocol:
//   set_data_nodes()  - one data node per dangling input edge, leading batch axis
//   add_data(batch)   - (b, n, d) batch sliced along axis 1 into the data nodes
//   contract()        - model-specific contraction; returns the output node
//   forward(batch)    - set_data_nodes (if needed) + add_data + contract; when
//                       the network is traced, replays the recorded plan instead
// Axis order of the result and the set of nodes created are stable across
// calls, so repeated forwards reuse the cached operations.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tnkit/network.hpp"
#include "tnkit/ops.hpp"
#include "tnkit/tensor.hpp"

namespace tnkit::models {

// --- embeddings -----------------------------------------------------------------

// unit:       x in [0,1] -> (sqrt(C(d-1,k)) cos(pi x/2)^(d-1-k) sin(pi x/2)^k)_k,
//             a unit vector for every x (d >= 2)
// add_ones:   x -> (1, x), d must be 2
// poly:       x -> (1, x, x^2, ..., x^(d-1))
// discretize: x in [0,1] -> one-hot of floor(x*d), clamped so x = 1.0 lands in
//             the last bin
// basis:      integer x in [0,d) -> one-hot
enum class EmbedMode { Unit, AddOnes, Poly, Discretize, Basis };

EmbedMode embed_mode_from_string(const std::string& name);
const char* embed_mode_name(EmbedMode mode);

// data (b, n) -> embedded (b, n, dim). Validates the mode's domain.
Tensor embed(const Tensor& data, EmbedMode mode, std::size_t dim);

// --- specs ------------------------------------------------------------------------

// Chain of n_sites cores (bond, phys, bond) with explicit size-1 boundary bonds.
struct MpsSpec {
  std::size_t n_sites = 0;
  std::size_t phys_dim = 2;
  std::size_t bond_dim = 2;
  double init_std = 1e-9;   // noise added to the identity initialization
  std::uint64_t seed = 0;
};

// MPS classifier: n_features positions, one of which is the output core
// (bond, out_dim, bond); the other n_features - 1 positions read one input
// feature each. out_position defaults to the middle, (n_features - 1) / 2.
struct MpsLayerSpec {
  std::size_t n_features = 0;
  std::size_t in_dim = 2;
  std::size_t out_dim = 2;
  std::size_t bond_dim = 2;
  std::optional<std::size_t> out_position;
  double init_std = 1e-9;
  std::uint64_t seed = 0;
};

// Chain of n_sites operator cores (bond, out, in, bond), size-1 boundary bonds.
struct MpoSpec {
  std::size_t n_sites = 0;
  std::size_t in_dim = 2;
  std::size_t out_dim = 2;
  std::size_t bond_dim = 1;
  double init_std = 1e-9;
  std::uint64_t seed = 0;
};

// Uniform chain: every site shares one (bond, phys, bond) core tensor.
struct UMpsSpec {
  std::size_t n_sites = 0;
  std::size_t phys_dim = 2;
  std::size_t bond_dim = 2;
  double init_std = 1e-9;
  std::uint64_t seed = 0;
};

struct UMpoSpec {
  std::size_t n_sites = 0;
  std::size_t in_dim = 2;
  std::size_t out_dim = 2;
  std::size_t bond_dim = 1;
  double init_std = 1e-9;
  std::uint64_t seed = 0;
};

// Balanced tree: arity^depth leaf inputs, one core per internal vertex with
// `arity` child bonds and a parent bond; the root's parent axis is the output.
struct TtnSpec {
  std::size_t arity = 2;
  std::size_t depth = 1;
  std::size_t phys_dim = 2;
  std::size_t bond_dim = 2;
  std::size_t out_dim = 2;
  double init_std = 1e-9;
  std::uint64_t seed = 0;
};

// --- data protocol base -----------------------------------------------------------

class Model {
 public:
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  graph::TensorNetwork& network() { return net_; }
  const graph::TensorNetwork& network() const { return net_; }

  // One data node per registered input edge, shape (batch, feature), connected
  // to the input axis. Idempotent.
  void set_data_nodes();
  // batch (b, n, d): slice k along axis 1 is assigned to data node k.
  void add_data(const Tensor& batch);
  // Model-specific contraction; must return the output node.
  virtual graph::Node contract() = 0;
  // The full protocol. Replays the traced plan when one is recorded.
  Tensor forward(const Tensor& batch);
  // Records the contraction plan from a batch-size-1 example.
  void trace(const Tensor& example);

  graph::Node output_node() const { return output_; }
  const std::vector<graph::Node>& data_nodes() const { return data_nodes_; }
  std::size_t n_inputs() const { return inputs_.size(); }

  // Contraction-path switches (see the chain models for their meaning).
  bool inline_input = true;
  bool inline_mats = true;

 protected:
  Model() = default;
  void register_input(const graph::Node& node, const std::string& axis);

  graph::TensorNetwork net_;
  std::vector<graph::AxisRef> inputs_;
  std::vector<graph::Node> data_nodes_;
  graph::Node output_;
};

// --- matrix product state -----------------------------------------------------------

enum class CanonMode { Svd, Qr };

class Mps : public Model {
 public:
  explicit Mps(const MpsSpec& spec);
  // Build from explicit cores (bond_l, phys, bond_r); boundary bonds must be 1.
  explicit Mps(std::vector<Tensor> cores);

  std::size_t n_sites() const { return sites_.size(); }
  const std::vector<graph::Node>& sites() const { return sites_; }
  Tensor core(std::size_t k) const;
  std::size_t bond_dim(std::size_t bond) const;  // bond k sits between sites k-1, k

  // Amplitudes <x_batch | psi>: forward(batch) -> (b,).
  graph::Node contract() override;

  // Dense statevector (d^n,), contracted with raw tensor math. Guarded against
  // absurd sizes.
  Tensor dense_vector() const;
  double norm() const;

  // Sweep QR (or SVD when truncating) so that sites left of `center` are
  // left-isometries and sites right of it are right-isometries. Truncation
  // (max_rank / cum_energy) requires CanonMode::Svd. Mutates the stored cores
  // with raw tensor math and resets the operation cache; re-trace afterwards.
  void canonicalize(std::size_t center, CanonMode mode = CanonMode::Qr,
                    std::optional<std::size_t> max_rank = std::nullopt,
                    std::optional<double> cum_energy = std::nullopt);

  // Von Neumann entropy across bond `cut` (between sites cut-1 and cut),
  // cut in [1, n_sites-1]. Normalizes the Schmidt spectrum internally.
  double entanglement_entropy(std::size_t cut);

  // Reduced density matrix of `count` contiguous sites starting at `first`,
  // as a (d^count, d^count) matrix, normalized to unit trace. d^count <= 64.
  Tensor reduced_density_matrix(std::size_t first, std::size_t count) const;

 private:
  void build(std::vector<Tensor> cores);
  std::vector<graph::Node> sites_;
  graph::Node cap_left_, cap_right_;
  std::size_t phys_dim_ = 0;
};

// --- MPS classifier ------------------------------------------------------------------

class MpsLayer : public Model {
 public:
  explicit MpsLayer(const MpsLayerSpec& spec);

  const MpsLayerSpec& spec() const { return spec_; }
  std::size_t out_position() const { return out_position_; }
  const std::vector<graph::Node>& cores() const { return cores_; }  // by position

  // Scores: forward(batch (b, n_features-1, in_dim)) -> (b, out_dim).
  graph::Node contract() override;

 private:
  MpsLayerSpec spec_;
  std::size_t out_position_ = 0;
  std::vector<graph::Node> cores_;
  graph::Node cap_left_, cap_right_;
};

// --- matrix product operator ----------------------------------------------------------

// Operator chains are value holders (no data protocol): they exist to be
// densified, contracted with an MPS, or written out as tensorization results.
class Mpo {
 public:
  explicit Mpo(const MpoSpec& spec);
  explicit Mpo(std::vector<Tensor> cores);  // (bond_l, out, in, bond_r)

  std::size_t n_sites() const { return sites_.size(); }
  const std::vector<graph::Node>& sites() const { return sites_; }
  Tensor core(std::size_t k) const;
  graph::TensorNetwork& network() { return net_; }
  const graph::TensorNetwork& network() const { return net_; }

  // Dense (out^n, in^n) matrix via raw tensor math.
  Tensor dense_matrix() const;

 private:
  void build(std::vector<Tensor> cores);
  graph::TensorNetwork net_;
  std::vector<graph::Node> sites_;
};

// Apply the operator to the state: per site, contract the MPS core's physical
// index with the MPO core's input index and merge the bond pairs, giving an
// MPS with physical dimension out_dim and bond dimension exactly
// bond(mps) * bond(mpo). Costs O(out*in * Dmps^2 * Dmpo^2) multiply-adds/site.
std::unique_ptr<Mps> mps_mpo_contract(const Mps& mps, const Mpo& mpo);

// --- uniform (weight-shared) chains ----------------------------------------------------

// All sites read the same (D, d, D) core from one shared store slot; the
// boundary bonds are closed by constant all-ones caps of size D. The store
// holds exactly one trainable tensor, and gradients accumulate over sites.
class UMps : public Model {
 public:
  explicit UMps(const UMpsSpec& spec);

  std::size_t n_sites() const { return sites_.size(); }
  const std::vector<graph::Node>& sites() const { return sites_; }
  graph::Node core_node() const { return core_; }
  Tensor core() const;
  void set_core(Tensor t);

  graph::Node contract() override;  // (b,) amplitudes

 private:
  UMpsSpec spec_;
  std::vector<graph::Node> sites_;
  graph::Node core_, cap_left_, cap_right_;
};

class UMpo {
 public:
  explicit UMpo(const UMpoSpec& spec);

  std::size_t n_sites() const { return sites_.size(); }
  const std::vector<graph::Node>& sites() const { return sites_; }
  graph::Node core_node() const { return core_; }
  Tensor core() const;
  void set_core(Tensor t);
  graph::TensorNetwork& network() { return net_; }

  Tensor dense_matrix() const;  // boundary bonds closed with all-ones caps

 private:
  UMpoSpec spec_;
  graph::TensorNetwork net_;
  std::vector<graph::Node> sites_;
  graph::Node core_;
};

// --- tree tensor network -----------------------------------------------------------------

class Ttn : public Model {
 public:
  explicit Ttn(const TtnSpec& spec);

  const TtnSpec& spec() const { return spec_; }
  std::size_t n_leaves() const;
  // levels()[l] holds the internal nodes of depth l (root at level 0).
  const std::vector<std::vector<graph::Node>>& levels() const { return levels_; }

  // Scores: forward(batch (b, n_leaves, phys_dim)) -> (b, out_dim),
  // contracted bottom-up, layer by layer.
  graph::Node contract() override;

 private:
  TtnSpec spec_;
  std::vector<std::vector<graph::Node>> levels_;
};

// --- matrix tensorization ----------------------------------------------------------------

struct TensorizeResult {
  std::vector<Tensor> cores;  // (bond_l, out, in, bond_r), boundary bonds 1
  // Upper bound on the Frobenius reconstruction error accumulated from the
  // singular values discarded at each cut: sqrt(sum of squared discards).
  double truncation_error = 0.0;
};

// Decompose a (d^n, d^n) matrix into an n-core operator chain by a sequential
// reshape + SVD sweep over the interleaved (row_k, col_k) index pairs. Bonds
// are truncated to max_rank when given; exact zero tails are always dropped.
TensorizeResult tensorize_matrix(const Tensor& w, std::size_t n, std::size_t d,
                                 std::optional<std::size_t> max_rank = std::nullopt);

}  // namespace tnkit::models
