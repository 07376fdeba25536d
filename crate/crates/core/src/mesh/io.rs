//! `MREIT-MESH 1` text format.
//!
//! ```text
//! MREIT-MESH 1
//! nodes <N>
//! <x> <y>
//! elements <E>
//! <i> <j> <k>
//! electrodes <L>
//! <node_index>
//! ```
//!
//! `#` starts a comment; blank lines are ignored. Floats are written with 17
//! significant digits so a save/load cycle is exact.

use super::{Point, TriangleMesh};
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::str::FromStr;

const MAGIC: &str = "MREIT-MESH 1";

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    /// Next non-empty line with comments stripped, plus its 1-based number.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for (i, raw) in self.inner.by_ref() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.last = i + 1;
                return Some((i + 1, line));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next_content()
            .ok_or_else(|| Error::parse(self.last + 1, format!("unexpected end of file, expected {what}")))
    }

    fn header(&mut self, keyword: &str) -> Result<usize> {
        let (n, line) = self.expect(keyword)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(keyword) {
            return Err(Error::parse(n, format!("expected `{keyword} <count>`, found `{line}`")));
        }
        let count = parse_field(parts.next(), n, "count")?;
        if parts.next().is_some() {
            return Err(Error::parse(n, "trailing tokens after count"));
        }
        Ok(count)
    }
}

fn parse_field<T: FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::parse(line, format!("cannot parse {what} from `{tok}`")))
}

fn parse_row<T: FromStr, const N: usize>(line: &str, n: usize, what: &str) -> Result<[T; N]>
where
    T: Copy + Default,
{
    let mut out = [T::default(); N];
    let mut parts = line.split_whitespace();
    for slot in out.iter_mut() {
        *slot = parse_field(parts.next(), n, what)?;
    }
    if parts.next().is_some() {
        return Err(Error::parse(n, format!("expected {N} values for {what}")));
    }
    Ok(out)
}

pub fn load_mesh(bytes: &[u8]) -> Result<TriangleMesh> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("mesh file is not UTF-8: {e}")))?;
    let mut lines = Lines::new(text);

    let (n, magic) = lines.expect("header")?;
    if magic != MAGIC {
        return Err(Error::parse(n, format!("expected `{MAGIC}` header")));
    }

    let node_count = lines.header("nodes")?;
    let mut nodes = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let (n, line) = lines.expect("node coordinates")?;
        let [x, y] = parse_row::<f64, 2>(line, n, "node coordinate")?;
        nodes.push(Point::new(x, y));
    }

    let element_count = lines.header("elements")?;
    let mut elements = Vec::with_capacity(element_count);
    for _ in 0..element_count {
        let (n, line) = lines.expect("element indices")?;
        elements.push(parse_row::<usize, 3>(line, n, "element index")?);
    }

    let electrode_count = lines.header("electrodes")?;
    let mut electrodes = Vec::with_capacity(electrode_count);
    for _ in 0..electrode_count {
        let (n, line) = lines.expect("electrode node")?;
        let [node] = parse_row::<usize, 1>(line, n, "electrode node")?;
        electrodes.push(node);
    }

    if let Some((n, _)) = lines.next_content() {
        return Err(Error::parse(n, "unexpected content after electrode list"));
    }
    TriangleMesh::new(nodes, elements, electrodes)
}

pub fn save_mesh(mesh: &TriangleMesh) -> Vec<u8> {
    let mut out = String::with_capacity(64 * (mesh.node_count() + mesh.element_count()));
    out.push_str(MAGIC);
    out.push('\n');
    let _ = writeln!(out, "nodes {}", mesh.node_count());
    for p in mesh.nodes() {
        let _ = writeln!(out, "{:.16e} {:.16e}", p.x, p.y);
    }
    let _ = writeln!(out, "elements {}", mesh.element_count());
    for [i, j, k] in mesh.elements() {
        let _ = writeln!(out, "{i} {j} {k}");
    }
    let _ = writeln!(out, "electrodes {}", mesh.electrodes().len());
    for node in mesh.electrodes() {
        let _ = writeln!(out, "{node}");
    }
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate_disk_mesh;

    const UNIT: &str = "MREIT-MESH 1\n# a comment\nnodes 3\n0 0\n1 0\n0 1\nelements 1\n0 1 2\nelectrodes 0\n";

    #[test]
    fn loads_unit_triangle() {
        let m = load_mesh(UNIT.as_bytes()).unwrap();
        assert_eq!(m.element_count(), 1);
        assert_eq!(crate::mesh::element_areas(&m).unwrap(), vec![0.5]);
    }

    #[test]
    fn clockwise_element_is_rejected() {
        let text = UNIT.replace("0 1 2", "0 2 1");
        assert!(matches!(load_mesh(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_counts_are_parse_errors() {
        let text = UNIT.replace("nodes 3", "nodes three");
        assert!(matches!(load_mesh(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let text = UNIT.replace("elements 1\n0 1 2\n", "elements 2\n0 1 2\n");
        assert!(load_mesh(text.as_bytes()).is_err());
        assert!(load_mesh(b"MREIT-MESH 2\n").is_err());
    }

    #[test]
    fn empty_mesh_is_rejected() {
        let text = "MREIT-MESH 1\nnodes 0\nelements 0\nelectrodes 0\n";
        assert!(matches!(load_mesh(text.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn save_is_deterministic_and_round_trips() {
        let m = load_mesh(UNIT.as_bytes()).unwrap();
        assert_eq!(save_mesh(&m), save_mesh(&m));

        let disk = generate_disk_mesh(1.0, 636, 16).unwrap();
        let bytes = save_mesh(&disk);
        assert_eq!(load_mesh(&bytes).unwrap(), disk);
    }
}
