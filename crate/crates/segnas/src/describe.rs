//! Human-readable genome listings and genome file parsing.

use std::fmt::Write as _;

use segnas_core::genome::{enumerate_connectivities, CellSpec, Genome, GenomeError, NUM_ENCODER_OUTPUTS};

fn conn_name(i: u8) -> String {
    let i = i as usize;
    if i < NUM_ENCODER_OUTPUTS {
        format!("encoder {i}")
    } else {
        format!("block {i}")
    }
}

fn cell_name(i: u8) -> String {
    match i as usize {
        0 => "cell input".into(),
        1 => "op0".into(),
        i => {
            let (b, k) = ((i - 2) / 3, (i - 2) % 3);
            match k {
                0 => format!("branch {b} left"),
                1 => format!("branch {b} right"),
                _ => format!("branch {b} sum"),
            }
        }
    }
}

/// Multi-line listing of a genome with operations named by abbreviation.
pub fn describe(g: &Genome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "genome {}", g.encode());
    s.push_str("connectivity:\n");
    for (k, p) in g.connectivity.pairs().iter().enumerate() {
        let _ = writeln!(
            s,
            "  block {}: cell({}) + cell({})",
            NUM_ENCODER_OUTPUTS + k,
            conn_name(p[0]),
            conn_name(p[1])
        );
    }
    let out: Vec<String> = g.connectivity.unconsumed_blocks().map(|b| b.to_string()).collect();
    let _ = writeln!(s, "  output: concat of blocks {}", out.join(", "));
    s.push_str("cell:\n");
    let op0 = g.cell.op0();
    let _ = writeln!(s, "  op0: {} ({})", op0.abbrev(), op0.code());
    for (b, br) in g.cell.branches().iter().enumerate() {
        let _ = writeln!(
            s,
            "  branch {b}: {} ({}) on {} + {} ({}) on {}",
            br.ops[0].abbrev(),
            br.ops[0].code(),
            cell_name(br.inputs[0]),
            br.ops[1].abbrev(),
            br.ops[1].code(),
            cell_name(br.inputs[1])
        );
    }
    let sums: Vec<String> = g
        .cell
        .unconsumed_branches()
        .map(|b| format!("branch {b} sum (#{})", CellSpec::branch_sum_index(b)))
        .collect();
    let _ = writeln!(s, "  output: {}", sums.join(" + "));
    s
}

/// One canonical connectivity per line, then `count=N`.
pub fn enumeration_text() -> String {
    let set = enumerate_connectivities();
    let mut s = String::new();
    for c in &set {
        let p = c.pairs();
        let _ = writeln!(s, "[[{},{}],[{},{}],[{},{}]]", p[0][0], p[0][1], p[1][0], p[1][1], p[2][0], p[2][1]);
    }
    let _ = writeln!(s, "count={}", set.len());
    s
}

/// Genomes from a file: one per non-empty line, `#` starts a comment.
pub fn parse_genome_lines(text: &str) -> Result<Vec<Genome>, (usize, GenomeError)> {
    text.lines()
        .enumerate()
        .filter_map(|(i, l)| {
            let l = l.split('#').next().unwrap_or("").trim();
            (!l.is_empty()).then_some((i + 1, l))
        })
        .map(|(no, l)| Genome::decode(l).map_err(|e| (no, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use segnas_core::genome::published::ARCH0;

    #[test]
    fn arch0_listing_names_operations() {
        let d = describe(&Genome::decode(ARCH0).unwrap());
        assert!(d.contains("op0: sep5x5 rate 6 (8)"), "{d}");
        assert!(d.contains("output: concat of blocks 4, 5, 6"), "{d}");
        assert!(d.contains("branch 1: sep5x5 rate 6 (8) on cell input + sep5x5 rate 6 (8) on branch 0 left"), "{d}");
    }

    #[test]
    fn enumeration_ends_with_count() {
        let text = enumeration_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.last(), Some(&"count=3150"));
        assert_eq!(lines.len(), 3151);
        assert_eq!(lines[0], "[[0,0],[0,0],[0,0]]");
    }

    #[test]
    fn genome_lines_skip_comments_and_report_line_numbers() {
        let text = format!("# published\n{ARCH0}\n\n[[[9,9]]]\n");
        assert_eq!(parse_genome_lines(&text).unwrap_err().0, 4);
        assert_eq!(parse_genome_lines(&format!("{ARCH0} # arch0\n")).unwrap().len(), 1);
    }
}
