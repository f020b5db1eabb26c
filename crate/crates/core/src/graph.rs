//! Computation-graph IR for a decoder instantiated from a [`Genome`].

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use crate::genome::{Genome, OpCode, NUM_ENCODER_OUTPUTS, NUM_PAIRS};

/// Shape of one feature map, without the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureDesc {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Downsampling factor relative to the network input.
    pub stride: usize,
}

impl FeatureDesc {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        assert!(channels >= 1 && height >= 1 && width >= 1, "empty feature map");
        assert!(stride.is_power_of_two(), "stride must be a power of two");
        Self {
            channels,
            height,
            width,
            stride,
        }
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for FeatureDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}/{}", self.channels, self.height, self.width, self.stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    /// Encoder output `k`, shallow to deep.
    Source(u8),
    Adapt,
    CellOp(OpCode),
    Sum,
    Concat,
    Fuse,
    Classifier,
    AuxCellOp(OpCode),
    AuxClassifier,
    Upsample,
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Source(_) => "source",
            NodeKind::Adapt => "adapt-1x1",
            NodeKind::CellOp(_) => "cell-op",
            NodeKind::Sum => "sum",
            NodeKind::Concat => "concat",
            NodeKind::Fuse => "fuse-1x1",
            NodeKind::Classifier => "classifier",
            NodeKind::AuxCellOp(_) => "aux-cell-op",
            NodeKind::AuxClassifier => "aux-classifier",
            NodeKind::Upsample => "upsample",
        }
    }

    pub fn op(&self) -> Option<OpCode> {
        match self {
            NodeKind::CellOp(op) | NodeKind::AuxCellOp(op) => Some(*op),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub out_desc: FeatureDesc,
    /// Set on every node that only feeds auxiliary outputs.
    pub removable: bool,
}

/// Intermediate supervision attached after each decoder-block sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AuxHead {
    #[default]
    None,
    /// Plain 1x1 classifier on the block sum.
    Classifier,
    /// A copy of the searched cell (own weights) followed by a 1x1 classifier.
    Cell,
}

impl AuxHead {
    pub fn name(self) -> &'static str {
        match self {
            AuxHead::None => "none",
            AuxHead::Classifier => "classifier",
            AuxHead::Cell => "cell",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(AuxHead::None),
            "classifier" | "clf" => Some(AuxHead::Classifier),
            "cell" => Some(AuxHead::Cell),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphIR {
    /// Topologically ordered, ascending ids.
    pub nodes: Vec<GraphNode>,
    pub main_output: NodeId,
    pub aux_outputs: Vec<NodeId>,
    pub block_sums: [NodeId; NUM_PAIRS],
    pub source_descs: [FeatureDesc; NUM_ENCODER_OUTPUTS],
    pub adapt_channels: usize,
    pub num_classes: usize,
    pub genome: Genome,
}

/// Parameter and multiply-add totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cost {
    pub params: u64,
    pub madds: u64,
}

impl core::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            madds: self.madds + o.madds,
        }
    }
}

impl core::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

/// Cost of a `k`x`k` convolution producing an `h`x`w` map. `groups` equal to
/// `cin` gives a depthwise convolution.
pub fn conv_cost(k: usize, cin: usize, cout: usize, groups: usize, h: usize, w: usize, bn: bool, bias: bool) -> Cost {
    let weights = (k * k * (cin / groups) * cout) as u64;
    let extra = if bn { 2 * cout as u64 } else { 0 } + if bias { cout as u64 } else { 0 };
    Cost {
        params: weights + extra,
        madds: weights * (h * w) as u64,
    }
}

/// Cost of a table operation on a `c`-channel `h`x`w` map.
pub fn op_cost(op: OpCode, c: usize, h: usize, w: usize) -> Cost {
    match op {
        OpCode::Skip | OpCode::Zero => Cost::default(),
        OpCode::Gap => conv_cost(1, c, c, 1, 1, 1, true, false),
        op if op.is_separable() => {
            let (k, _) = op.kernel().unwrap();
            conv_cost(k, c, c, c, h, w, true, false) + conv_cost(1, c, c, 1, h, w, true, false)
        }
        op => {
            let (k, _) = op.kernel().unwrap();
            conv_cost(k, c, c, 1, h, w, true, false)
        }
    }
}

struct Builder {
    nodes: Vec<GraphNode>,
}

impl Builder {
    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, out_desc: FeatureDesc, removable: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(GraphNode {
            id,
            kind,
            inputs,
            out_desc,
            removable,
        });
        id
    }

    fn desc(&self, id: NodeId) -> FeatureDesc {
        self.nodes[id.0 as usize].out_desc
    }

    fn resize(&mut self, id: NodeId, target: FeatureDesc, removable: bool) -> NodeId {
        let d = self.desc(id);
        if d.height == target.height && d.width == target.width {
            id
        } else {
            let out = FeatureDesc { channels: d.channels, ..target };
            self.push(NodeKind::Upsample, vec![id], out, removable)
        }
    }

    /// Sums operands, upsampling smaller ones to the largest spatial size.
    fn sum(&mut self, ids: &[NodeId], removable: bool) -> NodeId {
        if ids.len() == 1 {
            return ids[0];
        }
        let target = ids
            .iter()
            .map(|&i| self.desc(i))
            .max_by_key(|d| d.pixels())
            .unwrap();
        let inputs: Vec<NodeId> = ids.iter().map(|&i| self.resize(i, target, removable)).collect();
        let desc = self.desc(inputs[0]);
        self.push(NodeKind::Sum, inputs, desc, removable)
    }

    fn cell(&mut self, genome: &Genome, input: NodeId, aux: bool) -> NodeId {
        let kind = |op| if aux { NodeKind::AuxCellOp(op) } else { NodeKind::CellOp(op) };
        let desc = self.desc(input);
        let cell = &genome.cell;
        let op0 = self.push(kind(cell.op0()), vec![input], desc, aux);
        let mut pool = vec![input, op0];
        for br in cell.branches() {
            let a = self.push(kind(br.ops[0]), vec![pool[br.inputs[0] as usize]], desc, aux);
            let b = self.push(kind(br.ops[1]), vec![pool[br.inputs[1] as usize]], desc, aux);
            let s = self.push(NodeKind::Sum, vec![a, b], desc, aux);
            pool.extend([a, b, s]);
        }
        let outs: Vec<NodeId> = cell
            .unconsumed_branches()
            .map(|b| pool[crate::genome::CellSpec::branch_sum_index(b)])
            .collect();
        self.sum(&outs, aux)
    }
}

impl GraphIR {
    /// Instantiates `genome` over four encoder outputs ordered shallow to deep.
    pub fn build(
        genome: &Genome,
        sources: [FeatureDesc; NUM_ENCODER_OUTPUTS],
        adapt_channels: usize,
        num_classes: usize,
        aux: AuxHead,
    ) -> GraphIR {
        for w in sources.windows(2) {
            assert!(
                w[0].pixels() >= w[1].pixels(),
                "encoder outputs must be ordered shallow to deep"
            );
        }
        let mut b = Builder { nodes: Vec::new() };
        let mut pool = Vec::with_capacity(NUM_ENCODER_OUTPUTS + NUM_PAIRS);
        for (k, d) in sources.iter().enumerate() {
            let src = b.push(NodeKind::Source(k as u8), Vec::new(), *d, false);
            pool.push(b.push(NodeKind::Adapt, vec![src], d.with_channels(adapt_channels), false));
        }
        let mut block_sums = [NodeId(0); NUM_PAIRS];
        for (k, pair) in genome.connectivity.pairs().iter().enumerate() {
            let left = b.cell(genome, pool[pair[0] as usize], false);
            let right = b.cell(genome, pool[pair[1] as usize], false);
            let s = b.sum(&[left, right], false);
            block_sums[k] = s;
            pool.push(s);
        }
        let heads: Vec<NodeId> = genome.connectivity.unconsumed_blocks().map(|i| pool[i]).collect();
        let target = heads
            .iter()
            .map(|&i| b.desc(i))
            .max_by_key(|d| d.pixels())
            .unwrap();
        let resized: Vec<NodeId> = heads.iter().map(|&i| b.resize(i, target, false)).collect();
        let concat = b.push(
            NodeKind::Concat,
            resized.clone(),
            target.with_channels(adapt_channels * resized.len()),
            false,
        );
        let fuse = b.push(NodeKind::Fuse, vec![concat], target.with_channels(adapt_channels), false);
        let main_output = b.push(NodeKind::Classifier, vec![fuse], target.with_channels(num_classes), false);

        let mut aux_outputs = Vec::new();
        for &s in &block_sums {
            let feed = match aux {
                AuxHead::None => continue,
                AuxHead::Classifier => s,
                AuxHead::Cell => b.cell(genome, s, true),
            };
            let d = b.desc(feed).with_channels(num_classes);
            aux_outputs.push(b.push(NodeKind::AuxClassifier, vec![feed], d, true));
        }

        let mut ir = GraphIR {
            nodes: b.nodes,
            main_output,
            aux_outputs,
            block_sums,
            source_descs: sources,
            adapt_channels,
            num_classes,
            genome: *genome,
        };
        ir.prune_dead();
        ir
    }

    /// Removes nodes that reach no output. Sources are always kept.
    fn prune_dead(&mut self) {
        let mut live = BTreeSet::new();
        let mut stack: Vec<NodeId> = core::iter::once(self.main_output)
            .chain(self.aux_outputs.iter().copied())
            .collect();
        while let Some(id) = stack.pop() {
            if live.insert(id) {
                stack.extend(self.node(id).inputs.iter().copied());
            }
        }
        self.nodes
            .retain(|n| live.contains(&n.id) || matches!(n.kind, NodeKind::Source(_)));
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.nodes.binary_search_by_key(&id, |n| n.id).ok()
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[self.position(id).expect("node id present in graph")]
    }

    pub fn has_aux(&self) -> bool {
        !self.aux_outputs.is_empty()
    }

    /// Copy without any node on an auxiliary path.
    pub fn strip_aux(&self) -> GraphIR {
        GraphIR {
            nodes: self.nodes.iter().filter(|n| !n.removable).cloned().collect(),
            aux_outputs: Vec::new(),
            ..self.clone()
        }
    }

    /// Output map size of the main classifier.
    pub fn output_desc(&self) -> FeatureDesc {
        self.node(self.main_output).out_desc
    }

    pub fn node_cost(&self, node: &GraphNode) -> Cost {
        let d = node.out_desc;
        let input = |i: usize| self.node(node.inputs[i]).out_desc;
        match node.kind {
            NodeKind::Source(_) | NodeKind::Sum | NodeKind::Concat | NodeKind::Upsample => Cost::default(),
            NodeKind::Adapt | NodeKind::Fuse => {
                conv_cost(1, input(0).channels, d.channels, 1, d.height, d.width, true, false)
            }
            NodeKind::CellOp(op) | NodeKind::AuxCellOp(op) => op_cost(op, d.channels, d.height, d.width),
            NodeKind::Classifier | NodeKind::AuxClassifier => {
                conv_cost(1, input(0).channels, d.channels, 1, d.height, d.width, false, true)
            }
        }
    }

    /// Parameters and multiply-adds of the inference graph (auxiliary paths excluded).
    pub fn estimate(&self) -> Cost {
        self.nodes
            .iter()
            .filter(|n| !n.removable)
            .map(|n| self.node_cost(n))
            .sum()
    }

    /// Checks structural invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            for i in &n.inputs {
                if !seen.contains(i) {
                    return Err(format!("{} consumes {} before it is defined", n.id, i));
                }
                let d = self.node(*i).out_desc;
                if n.kind == NodeKind::Sum
                    && (d.channels != n.out_desc.channels
                        || d.height != n.out_desc.height
                        || d.width != n.out_desc.width)
                {
                    return Err(format!("sum {} operand {} has shape {}", n.id, i, d));
                }
                if !n.removable && self.node(*i).removable {
                    return Err(format!("main-path node {} consumes auxiliary node {}", n.id, i));
                }
            }
            seen.insert(n.id);
        }
        if self.node(self.main_output).removable {
            return Err(String::from("main output flagged removable"));
        }
        Ok(())
    }

    pub fn node_label(&self, n: &GraphNode) -> String {
        match n.kind {
            NodeKind::Source(k) => format!("source {}", k),
            NodeKind::CellOp(op) | NodeKind::AuxCellOp(op) => String::from(op.abbrev()),
            other => String::from(other.name()),
        }
    }

    /// Graphviz rendering. Auxiliary nodes are dashed.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        s.push_str("digraph decoder {\n  rankdir=BT;\n  node [shape=box, fontname=\"Helvetica\"];\n");
        for n in &self.nodes {
            let style = if n.removable { ", style=dashed" } else { "" };
            let _ = writeln!(
                s,
                "  {} [label=\"{}\\n{}\"{}];",
                n.id,
                self.node_label(n),
                n.out_desc,
                style
            );
        }
        for n in &self.nodes {
            for i in &n.inputs {
                let _ = writeln!(s, "  {} -> {};", i, n.id);
            }
        }
        s.push_str("}\n");
        s
    }

    /// One node per line: id, kind, op, inputs, output shape, removable flag.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let op = n.kind.op().map(|o| o.code() as i32).unwrap_or(-1);
            let inputs: Vec<String> = n.inputs.iter().map(|i| format!("{}", i.0)).collect();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t[{}]\t{}\t{}",
                n.id.0,
                n.kind.name(),
                op,
                inputs.join(","),
                n.out_desc,
                n.removable
            );
        }
        s
    }
}
