//! Integer-list genome describing a decoder: three connectivity pairs over a
//! growing pool of feature maps, followed by a cell configuration.
//!
//! Text form is a JSON-compatible nested array with no whitespace:
//!
//! ```text
//! [[[c1,c2],[c3,c4],[c5,c6]],[o1,[i2,i3,o2,o3],[i4,i5,o4,o5],[i6,i7,o6,o7]]]
//! ```
//!
//! The connectivity pool starts with the four encoder outputs (indices 0..4)
//! and each completed decoder block appends its output, so pair `k` may refer
//! to indices in `[0, 4 + k)`. The cell pool starts with the cell input (0)
//! and the first operation's output (1); each branch appends its two operation
//! outputs followed by their sum, so branch `b` may refer to `[0, 2 + 3b)`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use core::fmt;

use rand::Rng;
use thiserror::Error;

pub const NUM_ENCODER_OUTPUTS: usize = 4;
pub const NUM_PAIRS: usize = 3;
pub const NUM_BRANCHES: usize = 3;
pub const NUM_OPS: usize = 11;

/// Number of controller decisions needed to emit one genome.
pub const NUM_TOKENS: usize = 2 * NUM_PAIRS + 1 + 4 * NUM_BRANCHES;

/// Pool size available to connectivity pair `k`.
pub const fn connectivity_pool(pair: usize) -> usize {
    NUM_ENCODER_OUTPUTS + pair
}

/// Pool size available to cell branch `b`.
pub const fn cell_pool(branch: usize) -> usize {
    2 + 3 * branch
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenomeError {
    #[error("malformed genome text: {0}")]
    Parse(String),
    #[error("connectivity pair {pair} index {index} outside valid range [0, {bound})")]
    ConnectivityRange { pair: usize, index: u32, bound: usize },
    #[error("cell branch {branch} index {index} outside valid range [0, {bound})")]
    CellRange { branch: usize, index: u32, bound: usize },
    #[error("operation code {0} outside valid range [0, 10]")]
    OpCode(u32),
}

/// One of the eleven candidate operations, indexed as in the operation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum OpCode {
    Conv1x1 = 0,
    Conv3x3 = 1,
    Sep3x3 = 2,
    Sep5x5 = 3,
    Gap = 4,
    Conv3x3Rate3 = 5,
    Conv3x3Rate12 = 6,
    Sep3x3Rate3 = 7,
    Sep5x5Rate6 = 8,
    Skip = 9,
    Zero = 10,
}

impl OpCode {
    pub const ALL: [OpCode; NUM_OPS] = [
        OpCode::Conv1x1,
        OpCode::Conv3x3,
        OpCode::Sep3x3,
        OpCode::Sep5x5,
        OpCode::Gap,
        OpCode::Conv3x3Rate3,
        OpCode::Conv3x3Rate12,
        OpCode::Sep3x3Rate3,
        OpCode::Sep5x5Rate6,
        OpCode::Skip,
        OpCode::Zero,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u32) -> Result<Self, GenomeError> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(GenomeError::OpCode(code))
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            OpCode::Conv1x1 => "conv1x1",
            OpCode::Conv3x3 => "conv3x3",
            OpCode::Sep3x3 => "sep3x3",
            OpCode::Sep5x5 => "sep5x5",
            OpCode::Gap => "gap",
            OpCode::Conv3x3Rate3 => "conv3x3 rate 3",
            OpCode::Conv3x3Rate12 => "conv3x3 rate 12",
            OpCode::Sep3x3Rate3 => "sep3x3 rate 3",
            OpCode::Sep5x5Rate6 => "sep5x5 rate 6",
            OpCode::Skip => "skip",
            OpCode::Zero => "zero",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            OpCode::Conv1x1 => "conv 1x1",
            OpCode::Conv3x3 => "conv 3x3",
            OpCode::Sep3x3 => "separable conv 3x3",
            OpCode::Sep5x5 => "separable conv 5x5",
            OpCode::Gap => "global average pooling followed by upsampling and conv 1x1",
            OpCode::Conv3x3Rate3 => "conv 3x3 with dilation rate 3",
            OpCode::Conv3x3Rate12 => "conv 3x3 with dilation rate 12",
            OpCode::Sep3x3Rate3 => "separable conv 3x3 with dilation rate 3",
            OpCode::Sep5x5Rate6 => "separable conv 5x5 with dilation rate 6",
            OpCode::Skip => "skip-connection",
            OpCode::Zero => "zero-operation that effectively nullifies the path",
        }
    }

    /// Kernel size and dilation for convolutional operations.
    pub fn kernel(self) -> Option<(usize, usize)> {
        match self {
            OpCode::Conv1x1 => Some((1, 1)),
            OpCode::Conv3x3 | OpCode::Sep3x3 => Some((3, 1)),
            OpCode::Sep5x5 => Some((5, 1)),
            OpCode::Conv3x3Rate3 | OpCode::Sep3x3Rate3 => Some((3, 3)),
            OpCode::Conv3x3Rate12 => Some((3, 12)),
            OpCode::Sep5x5Rate6 => Some((5, 6)),
            OpCode::Gap => Some((1, 1)),
            OpCode::Skip | OpCode::Zero => None,
        }
    }

    pub fn is_separable(self) -> bool {
        matches!(
            self,
            OpCode::Sep3x3 | OpCode::Sep5x5 | OpCode::Sep3x3Rate3 | OpCode::Sep5x5Rate6
        )
    }

    pub fn is_parametric(self) -> bool {
        !matches!(self, OpCode::Skip | OpCode::Zero)
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnectivitySpec {
    pairs: [[u8; 2]; NUM_PAIRS],
}

impl ConnectivitySpec {
    pub fn new(pairs: [[u32; 2]; NUM_PAIRS]) -> Result<Self, GenomeError> {
        let mut out = [[0u8; 2]; NUM_PAIRS];
        for (k, pair) in pairs.iter().enumerate() {
            let bound = connectivity_pool(k);
            for (slot, &index) in pair.iter().enumerate() {
                if index as usize >= bound {
                    return Err(GenomeError::ConnectivityRange { pair: k, index, bound });
                }
                out[k][slot] = index as u8;
            }
        }
        Ok(Self { pairs: out })
    }

    pub fn pairs(&self) -> &[[u8; 2]; NUM_PAIRS] {
        &self.pairs
    }

    pub fn canonical(&self) -> Self {
        let mut pairs = self.pairs;
        for pair in pairs.iter_mut() {
            pair.sort_unstable();
        }
        Self { pairs }
    }

    /// Decoder pool indices (4, 5, 6 for blocks 0, 1, 2) that no later pair consumes.
    pub fn unconsumed_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_PAIRS).map(|k| NUM_ENCODER_OUTPUTS + k).filter(move |&idx| {
            !self
                .pairs
                .iter()
                .any(|pair| pair.iter().any(|&i| i as usize == idx))
        })
    }
}

/// One cell branch: two pool locations and the operation applied to each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Branch {
    pub inputs: [u8; 2],
    pub ops: [OpCode; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellSpec {
    op0: OpCode,
    branches: [Branch; NUM_BRANCHES],
}

impl CellSpec {
    /// Builds a cell from the raw `[i_a, i_b, op_a, op_b]` quadruples.
    pub fn new(op0: u32, branches: [[u32; 4]; NUM_BRANCHES]) -> Result<Self, GenomeError> {
        let op0 = OpCode::from_code(op0)?;
        let mut out = [Branch {
            inputs: [0, 0],
            ops: [OpCode::Zero, OpCode::Zero],
        }; NUM_BRANCHES];
        for (b, raw) in branches.iter().enumerate() {
            let bound = cell_pool(b);
            for slot in 0..2 {
                let index = raw[slot];
                if index as usize >= bound {
                    return Err(GenomeError::CellRange { branch: b, index, bound });
                }
                out[b].inputs[slot] = index as u8;
                out[b].ops[slot] = OpCode::from_code(raw[2 + slot])?;
            }
        }
        Ok(Self { op0, branches: out })
    }

    pub fn op0(&self) -> OpCode {
        self.op0
    }

    pub fn branches(&self) -> &[Branch; NUM_BRANCHES] {
        &self.branches
    }

    pub fn canonical(&self) -> Self {
        let mut branches = self.branches;
        for br in branches.iter_mut() {
            let a = (br.inputs[0], br.ops[0]);
            let b = (br.inputs[1], br.ops[1]);
            if b < a {
                br.inputs = [b.0, a.0];
                br.ops = [b.1, a.1];
            }
        }
        Self {
            op0: self.op0,
            branches,
        }
    }

    /// Cell-pool index of branch `b`'s sum.
    pub fn branch_sum_index(b: usize) -> usize {
        cell_pool(b) + 2
    }

    /// Branches whose sums are never sampled by a later branch; their sums form the cell output.
    pub fn unconsumed_branches(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_BRANCHES).filter(move |&b| {
            let idx = Self::branch_sum_index(b);
            !self
                .branches
                .iter()
                .any(|br| br.inputs.iter().any(|&i| i as usize == idx))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Genome {
    pub connectivity: ConnectivitySpec,
    pub cell: CellSpec,
}

type RawGenome = ([[u32; 2]; NUM_PAIRS], (u32, [u32; 4], [u32; 4], [u32; 4]));

impl Genome {
    pub fn new(connectivity: ConnectivitySpec, cell: CellSpec) -> Self {
        Self { connectivity, cell }
    }

    /// Canonical text form.
    pub fn encode(&self) -> String {
        let p = &self.connectivity.pairs;
        let c = &self.cell;
        let mut s = format!(
            "[[[{},{}],[{},{}],[{},{}]],[{}",
            p[0][0],
            p[0][1],
            p[1][0],
            p[1][1],
            p[2][0],
            p[2][1],
            c.op0.code()
        );
        for br in &c.branches {
            s.push_str(&format!(
                ",[{},{},{},{}]",
                br.inputs[0],
                br.inputs[1],
                br.ops[0].code(),
                br.ops[1].code()
            ));
        }
        s.push_str("]]");
        s
    }

    pub fn decode(text: &str) -> Result<Self, GenomeError> {
        let (pairs, (op0, b0, b1, b2)): RawGenome = serde_json::from_str(text.trim())
            .map_err(|e| GenomeError::Parse(e.to_string()))?;
        let connectivity = ConnectivitySpec::new(pairs)?;
        let cell = CellSpec::new(op0, [b0, b1, b2])?;
        Ok(Self { connectivity, cell })
    }

    /// Representative under operand-order symmetry (pair members, branch operands).
    pub fn canonicalize(&self) -> Self {
        Self {
            connectivity: self.connectivity.canonical(),
            cell: self.cell.canonical(),
        }
    }

    /// Independent uniform draw of every decision within its valid range.
    pub fn sample_uniform<G: Rng + ?Sized>(rng: &mut G) -> Self {
        let mut pairs = [[0u32; 2]; NUM_PAIRS];
        for (k, pair) in pairs.iter_mut().enumerate() {
            for slot in pair.iter_mut() {
                *slot = rng.random_range(0..connectivity_pool(k) as u32);
            }
        }
        let op0 = rng.random_range(0..NUM_OPS as u32);
        let mut branches = [[0u32; 4]; NUM_BRANCHES];
        for (b, br) in branches.iter_mut().enumerate() {
            br[0] = rng.random_range(0..cell_pool(b) as u32);
            br[1] = rng.random_range(0..cell_pool(b) as u32);
            br[2] = rng.random_range(0..NUM_OPS as u32);
            br[3] = rng.random_range(0..NUM_OPS as u32);
        }
        Self {
            connectivity: ConnectivitySpec::new(pairs).expect("sampled within range"),
            cell: CellSpec::new(op0, branches).expect("sampled within range"),
        }
    }

    /// Flattened decision sequence in controller emission order.
    pub fn tokens(&self) -> [u8; NUM_TOKENS] {
        let mut t = [0u8; NUM_TOKENS];
        let mut i = 0;
        for pair in &self.connectivity.pairs {
            t[i] = pair[0];
            t[i + 1] = pair[1];
            i += 2;
        }
        t[i] = self.cell.op0.code();
        i += 1;
        for br in &self.cell.branches {
            t[i] = br.inputs[0];
            t[i + 1] = br.inputs[1];
            t[i + 2] = br.ops[0].code();
            t[i + 3] = br.ops[1].code();
            i += 4;
        }
        t
    }

    pub fn from_tokens(t: &[u8; NUM_TOKENS]) -> Result<Self, GenomeError> {
        let pairs = [
            [t[0] as u32, t[1] as u32],
            [t[2] as u32, t[3] as u32],
            [t[4] as u32, t[5] as u32],
        ];
        let mut branches = [[0u32; 4]; NUM_BRANCHES];
        for (b, br) in branches.iter_mut().enumerate() {
            for j in 0..4 {
                br[j] = t[7 + 4 * b + j] as u32;
            }
        }
        Ok(Self {
            connectivity: ConnectivitySpec::new(pairs)?,
            cell: CellSpec::new(t[6] as u32, branches)?,
        })
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

/// What a token position decides, with the number of valid choices there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    ConnectivityIndex { pool: usize },
    CellIndex { pool: usize },
    Op,
}

impl Decision {
    pub fn choices(self) -> usize {
        match self {
            Decision::ConnectivityIndex { pool } | Decision::CellIndex { pool } => pool,
            Decision::Op => NUM_OPS,
        }
    }
}

/// Decision type at every token position, in emission order.
pub fn decision_schedule() -> [Decision; NUM_TOKENS] {
    let mut out = [Decision::Op; NUM_TOKENS];
    let mut i = 0;
    for k in 0..NUM_PAIRS {
        out[i] = Decision::ConnectivityIndex { pool: connectivity_pool(k) };
        out[i + 1] = Decision::ConnectivityIndex { pool: connectivity_pool(k) };
        i += 2;
    }
    out[i] = Decision::Op;
    i += 1;
    for b in 0..NUM_BRANCHES {
        out[i] = Decision::CellIndex { pool: cell_pool(b) };
        out[i + 1] = Decision::CellIndex { pool: cell_pool(b) };
        out[i + 2] = Decision::Op;
        out[i + 3] = Decision::Op;
        i += 4;
    }
    out
}

/// Every valid connectivity structure, reduced modulo pair-member order.
pub fn enumerate_connectivities() -> BTreeSet<ConnectivitySpec> {
    let mut set = BTreeSet::new();
    for a0 in 0..4u32 {
        for a1 in 0..4u32 {
            for b0 in 0..5u32 {
                for b1 in 0..5u32 {
                    for c0 in 0..6u32 {
                        for c1 in 0..6u32 {
                            let spec = ConnectivitySpec::new([[a0, a1], [b0, b1], [c0, c1]])
                                .expect("enumerated within range");
                            set.insert(spec.canonical());
                        }
                    }
                }
            }
        }
    }
    set
}

/// Analytic sizes of the search space, before and after operand-order symmetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceSize {
    pub connectivity_ordered: u64,
    pub connectivity_unordered: u64,
    pub cells_ordered: f64,
    pub cells_unordered: f64,
}

pub fn space_size() -> SpaceSize {
    let mut conn_ordered = 1u64;
    let mut conn_unordered = 1u64;
    for k in 0..NUM_PAIRS {
        let n = connectivity_pool(k) as u64;
        conn_ordered *= n * n;
        conn_unordered *= n * (n + 1) / 2;
    }
    let ops = NUM_OPS as f64;
    let mut cells_ordered = ops;
    let mut cells_unordered = ops;
    for b in 0..NUM_BRANCHES {
        let m = cell_pool(b) as f64 * ops;
        cells_ordered *= m * m;
        cells_unordered *= m * (m + 1.0) / 2.0;
    }
    SpaceSize {
        connectivity_ordered: conn_ordered,
        connectivity_unordered: conn_unordered,
        cells_ordered,
        cells_unordered,
    }
}

/// Published architectures, in canonical text form.
pub mod published {
    pub const ARCH0: &str = "[[[3,3],[3,2],[3,0]],[8,[0,0,5,2],[0,2,8,8],[0,5,1,4]]]";
    pub const ARCH1: &str = "[[[2,3],[3,1],[4,4]],[2,[1,0,3,6],[0,1,2,8],[2,0,6,1]]]";
    pub const ARCH2: &str = "[[[1,3],[4,3],[2,2]],[5,[0,0,4,1],[3,2,0,1],[5,6,5,0]]]";
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn published_round_trip() {
        for text in [published::ARCH0, published::ARCH1, published::ARCH2] {
            let g = Genome::decode(text).unwrap();
            assert_eq!(g.encode(), text);
        }
    }

    #[test]
    fn decode_accepts_whitespace() {
        let g = Genome::decode("[[[3, 3], [3, 2], [3, 0]], [8, [0, 0, 5, 2], [0, 2, 8, 8], [0, 5, 1, 4]]]")
            .unwrap();
        assert_eq!(g.encode(), published::ARCH0);
    }

    #[test]
    fn decode_range_errors() {
        let err = Genome::decode("[[[0,9],[3,2],[3,0]],[8,[0,0,5,2],[0,2,8,8],[0,5,1,4]]]").unwrap_err();
        assert_eq!(err, GenomeError::ConnectivityRange { pair: 0, index: 9, bound: 4 });
        let err = Genome::decode("[[[0,0],[3,2],[3,0]],[8,[0,2,5,2],[0,2,8,8],[0,5,1,4]]]").unwrap_err();
        assert_eq!(err, GenomeError::CellRange { branch: 0, index: 2, bound: 2 });
        let err = Genome::decode("[[[0,0],[3,2],[3,0]],[11,[0,0,5,2],[0,2,8,8],[0,5,1,4]]]").unwrap_err();
        assert_eq!(err, GenomeError::OpCode(11));
    }

    #[test]
    fn decode_parse_errors() {
        for bad in ["", "[[[0,0]]]", "[[[0,0],[3,2],[3,0]],[8,[0,0,5,2],[0,2,8,8]]]", "not a list"] {
            assert!(matches!(Genome::decode(bad), Err(GenomeError::Parse(_))), "{bad}");
        }
    }

    #[test]
    fn arch1_pair2_refers_to_block_output() {
        let g = Genome::decode(published::ARCH1).unwrap();
        assert_eq!(g.connectivity.pairs()[2], [4, 4]);
        let unconsumed: Vec<_> = g.connectivity.unconsumed_blocks().collect();
        assert_eq!(unconsumed, [5, 6]);
    }

    #[test]
    fn arch0_consumption() {
        let g = Genome::decode(published::ARCH0).unwrap();
        assert_eq!(g.connectivity.unconsumed_blocks().collect::<Vec<_>>(), [4, 5, 6]);
        assert_eq!(g.cell.unconsumed_branches().collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn canonicalize_examples() {
        let g = Genome::decode("[[[3,2],[3,2],[3,0]],[8,[0,0,5,2],[4,3,4,5],[0,5,1,4]]]").unwrap();
        let c = g.canonicalize();
        assert_eq!(c.encode(), "[[[2,3],[2,3],[0,3]],[8,[0,0,2,5],[3,4,5,4],[0,5,1,4]]]");
        let arch0 = Genome::decode(published::ARCH0).unwrap().canonicalize();
        assert_eq!(arch0.canonicalize(), arch0);
    }

    #[test]
    fn tokens_round_trip() {
        let g = Genome::decode(published::ARCH2).unwrap();
        assert_eq!(Genome::from_tokens(&g.tokens()).unwrap(), g);
    }

    #[test]
    fn first_pair_alone_has_ten_unordered_choices() {
        let mut set = BTreeSet::new();
        for a in 0..4u8 {
            for b in 0..4u8 {
                set.insert((a.min(b), a.max(b)));
            }
        }
        assert_eq!(set.len(), 10);
    }

    #[test]
    fn enumeration_matches_product_formula() {
        let set = enumerate_connectivities();
        // 10 * 15 * 21 unordered pairs with replacement per position.
        assert_eq!(set.len(), 3150);
        assert_eq!(space_size().connectivity_unordered, 3150);
        assert!(set.iter().all(|c| c.canonical() == *c));
    }

    #[test]
    fn space_size_cells() {
        let s = space_size();
        assert_eq!(s.connectivity_ordered, 16 * 25 * 36);
        assert!((s.cells_ordered - 11.0 * 484.0 * 3025.0 * 7744.0).abs() < 1.0);
        assert!((s.cells_unordered - 11.0 * 253.0 * 1540.0 * 3916.0).abs() < 1.0);
    }

    #[test]
    fn sample_uniform_is_deterministic_and_valid() {
        let a = Genome::sample_uniform(&mut ChaCha8Rng::seed_from_u64(7));
        let b = Genome::sample_uniform(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let g = Genome::sample_uniform(&mut rng);
            assert_eq!(Genome::decode(&g.encode()).unwrap(), g);
        }
    }

    #[test]
    fn sample_uniform_first_index_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let g = Genome::sample_uniform(&mut rng);
            counts[g.connectivity.pairs()[0][0] as usize] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 3 dof, 99.9% quantile.
        assert!(chi2 < 16.27, "chi2 {chi2}");
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn decision_schedule_covers_every_token() {
        let s = decision_schedule();
        assert_eq!(s.len(), 19);
        assert_eq!(s[0], Decision::ConnectivityIndex { pool: 4 });
        assert_eq!(s[5], Decision::ConnectivityIndex { pool: 6 });
        assert_eq!(s[6], Decision::Op);
        assert_eq!(s[15], Decision::CellIndex { pool: 8 });
        assert_eq!(s[18], Decision::Op);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn genome() -> impl Strategy<Value = Genome> {
            any::<u64>().prop_map(|s| Genome::sample_uniform(&mut ChaCha8Rng::seed_from_u64(s)))
        }

        proptest! {
            #[test]
            fn round_trip(g in genome()) {
                prop_assert_eq!(Genome::decode(&g.encode()).unwrap(), g);
            }

            #[test]
            fn canonical_is_idempotent_and_swap_invariant(g in genome(), pair in 0usize..3, branch in 0usize..3) {
                let c = g.canonicalize();
                prop_assert_eq!(c.canonicalize(), c);
                let mut t = g.tokens();
                t.swap(2 * pair, 2 * pair + 1);
                let o = 7 + 4 * branch;
                t.swap(o, o + 1);
                t.swap(o + 2, o + 3);
                let swapped = Genome::from_tokens(&t).unwrap();
                prop_assert_eq!(swapped.canonicalize(), c);
            }
        }
    }
}
