//! Line-oriented grid description format.
//!
//! ```text
//! # comments and blank lines are ignored
//! microgrid-grid 1
//! pcc_voltage <re> <im>
//! impedance_per_m <re> <im>
//! # node <id> <kind> <parent> <length_m> <load_re_VA> <load_im_VA> <smart> [<z_re> <z_im>]
//! node 0 pcc - - - - 1
//! node 1 dg 0 30 4000 1500 1
//! node 2 load 1 25.5 2500 900 0
//! node 3 junction 1 12 - - 1
//! ```
//!
//! Kinds are `pcc`, `load`, `dg` and `junction`. `-` marks an absent field.
//! The optional trailing pair overrides the header impedance for the branch
//! feeding that node. Numbers are written with the shortest representation
//! that parses back to the same `f64`, so write → read is lossless.

use std::fmt::Write as _;

use super::{Branch, GridNode, GridTree, NodeId, NodeKind, Phasor};
use crate::error::GridError;

const MAGIC: &str = "microgrid-grid";

pub fn write_grid(grid: &GridTree) -> String {
    let header_z = grid
        .branches()
        .first()
        .map(|b| b.impedance_per_m)
        .unwrap_or_default();
    let mut out = String::new();
    writeln!(out, "{MAGIC} 1").unwrap();
    let u = grid.pcc_voltage();
    writeln!(out, "pcc_voltage {} {}", u.re, u.im).unwrap();
    writeln!(out, "impedance_per_m {} {}", header_z.re, header_z.im).unwrap();
    writeln!(
        out,
        "# node <id> <kind> <parent> <length_m> <load_re_VA> <load_im_VA> <smart> [<z_re> <z_im>]"
    )
    .unwrap();
    for node in grid.nodes() {
        let smart = u8::from(node.is_smart);
        let load = match node.load_demand {
            Some(s) => format!("{} {}", s.re, s.im),
            None => "- -".to_string(),
        };
        match grid.parent(node.id) {
            None => {
                writeln!(out, "node {} {} - - {load} {smart}", node.id.0, node.kind.as_str())
                    .unwrap();
            }
            Some(p) => {
                let b = &grid.branches()[node.id.0 - 1];
                write!(
                    out,
                    "node {} {} {} {} {load} {smart}",
                    node.id.0,
                    node.kind.as_str(),
                    p.0,
                    b.length
                )
                .unwrap();
                if b.impedance_per_m != header_z {
                    write!(out, " {} {}", b.impedance_per_m.re, b.impedance_per_m.im).unwrap();
                }
                out.push('\n');
            }
        }
    }
    out
}

fn parse_f64(tok: &str, line: usize) -> Result<f64, GridError> {
    tok.parse::<f64>().map_err(|_| GridError::Parse {
        line,
        msg: format!("expected a number, found {tok:?}"),
    })
}

fn opt_f64(tok: &str, line: usize) -> Result<Option<f64>, GridError> {
    if tok == "-" {
        Ok(None)
    } else {
        parse_f64(tok, line).map(Some)
    }
}

pub fn read_grid(text: &str) -> Result<GridTree, GridError> {
    let mut saw_magic = false;
    let mut pcc_voltage = None;
    let mut header_z = None;
    let mut nodes = Vec::new();
    // (parent, child, length, override)
    let mut edges: Vec<(usize, usize, f64, Option<Phasor>)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        let bad = |msg: String| GridError::Parse { line, msg };
        match toks[0] {
            MAGIC => {
                if toks.get(1) != Some(&"1") {
                    return Err(bad("unsupported format version".into()));
                }
                saw_magic = true;
            }
            "pcc_voltage" | "impedance_per_m" => {
                if toks.len() != 3 {
                    return Err(bad(format!("{} takes two numbers", toks[0])));
                }
                let z = Phasor::new(parse_f64(toks[1], line)?, parse_f64(toks[2], line)?);
                if toks[0] == "pcc_voltage" {
                    pcc_voltage = Some(z);
                } else {
                    header_z = Some(z);
                }
            }
            "node" => {
                if toks.len() != 8 && toks.len() != 10 {
                    return Err(bad(format!("node record has {} fields", toks.len())));
                }
                let id: usize = toks[1]
                    .parse()
                    .map_err(|_| bad(format!("bad node id {:?}", toks[1])))?;
                let kind = NodeKind::parse(toks[2])
                    .ok_or_else(|| bad(format!("unknown node kind {:?}", toks[2])))?;
                let load = match (opt_f64(toks[5], line)?, opt_f64(toks[6], line)?) {
                    (Some(re), Some(im)) => Some(Phasor::new(re, im)),
                    (None, None) => None,
                    _ => return Err(bad("load needs both components or neither".into())),
                };
                let is_smart = match toks[7] {
                    "1" => true,
                    "0" => false,
                    other => return Err(bad(format!("smart flag must be 0 or 1, got {other:?}"))),
                };
                if toks[3] != "-" {
                    let parent: usize = toks[3]
                        .parse()
                        .map_err(|_| bad(format!("bad parent id {:?}", toks[3])))?;
                    let length = parse_f64(toks[4], line)?;
                    let over = if toks.len() == 10 {
                        Some(Phasor::new(parse_f64(toks[8], line)?, parse_f64(toks[9], line)?))
                    } else {
                        None
                    };
                    edges.push((parent, id, length, over));
                } else if toks[4] != "-" {
                    return Err(bad("root record cannot have a branch length".into()));
                }
                nodes.push(GridNode {
                    id: NodeId(id),
                    kind,
                    load_demand: load,
                    is_smart,
                });
            }
            other => return Err(bad(format!("unknown record {other:?}"))),
        }
    }

    if !saw_magic {
        return Err(GridError::Parse {
            line: 1,
            msg: format!("missing '{MAGIC} 1' header"),
        });
    }
    let pcc_voltage = pcc_voltage.ok_or(GridError::Parse {
        line: 0,
        msg: "missing pcc_voltage".into(),
    })?;
    let header_z = header_z.ok_or(GridError::Parse {
        line: 0,
        msg: "missing impedance_per_m".into(),
    })?;
    let branches = edges
        .into_iter()
        .map(|(p, c, len, over)| Branch::new(p, c, len, over.unwrap_or(header_z)))
        .collect();
    GridTree::new(pcc_voltage, nodes, branches)
}
