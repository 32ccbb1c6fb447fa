//! Clustered CSV input and output.
//!
//! Header: `cluster,t,y,x1..x{d_x},z1..z{d_z}`. Rows are sorted by
//! `(cluster, t)` and `z1` is the intercept.

use std::io::{Read, Write};

use gaplm::types::validate_dataset;
use gaplm::{Cluster, ClusterDataset};
use nalgebra::{DMatrix, DVector};

use crate::CliError;

/// A dataset together with the names of its covariate columns.
#[derive(Clone, Debug)]
pub struct NamedDataset {
    pub data: ClusterDataset,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

fn numbered(header: &[String], prefix: char) -> Vec<String> {
    header
        .iter()
        .filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok())
        .cloned()
        .collect()
}

fn check_header(header: &[String]) -> Result<(usize, usize), CliError> {
    let bad = |m: String| Err(CliError::Input(format!("bad header: {m}")));
    if header.len() < 4 || header[..3] != ["cluster", "t", "y"] {
        return bad("expected it to start with cluster,t,y".into());
    }
    let d_x = numbered(header, 'x').len();
    let d_z = numbered(header, 'z').len();
    if d_z == 0 {
        return Err(CliError::Input("missing intercept column z1".into()));
    }
    let expected: Vec<String> = ["cluster", "t", "y"]
        .into_iter()
        .map(String::from)
        .chain((1..=d_x).map(|j| format!("x{j}")))
        .chain((1..=d_z).map(|j| format!("z{j}")))
        .collect();
    if header != expected {
        return bad(format!("expected {}", expected.join(",")));
    }
    Ok((d_x, d_z))
}

struct Rows {
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
}

impl Rows {
    fn new() -> Self {
        Self { y: Vec::new(), x: Vec::new(), z: Vec::new() }
    }

    fn into_cluster(self, d_x: usize, d_z: usize) -> Cluster {
        let t = self.y.len();
        Cluster::new(
            DVector::from_vec(self.y),
            DMatrix::from_row_slice(t, d_x, &self.x),
            DMatrix::from_row_slice(t, d_z, &self.z),
        )
    }
}

/// Parses and validates a clustered CSV.
pub fn read_dataset<R: Read>(reader: R) -> Result<NamedDataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("cannot read header: {e}")))?
        .iter()
        .map(String::from)
        .collect();
    let (d_x, d_z) = check_header(&header)?;
    let mut clusters = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut current: Option<(String, f64, Rows)> = None;
    for (line, rec) in rdr.records().enumerate() {
        let row = line + 2;
        let rec = rec.map_err(|e| CliError::Input(format!("row {row}: {e}")))?;
        let num = |k: usize| -> Result<f64, CliError> {
            rec[k].parse::<f64>().map_err(|_| {
                CliError::Input(format!("row {row}, column {}: '{}' is not a number", header[k], &rec[k]))
            })
        };
        let id = rec[0].to_string();
        let t = num(1)?;
        match &mut current {
            Some((cid, last_t, _)) if *cid == id => {
                if t <= *last_t {
                    return Err(CliError::Input(format!("row {row}: t must increase within cluster {id}")));
                }
                *last_t = t;
            }
            _ => {
                if !seen.insert(id.clone()) {
                    return Err(CliError::Input(format!("row {row}: rows of cluster {id} are not contiguous")));
                }
                if let Some((_, _, rows)) = current.replace((id, t, Rows::new())) {
                    clusters.push(rows.into_cluster(d_x, d_z));
                }
            }
        }
        let rows = &mut current.as_mut().expect("cluster started").2;
        rows.y.push(num(2)?);
        for k in 0..d_x {
            rows.x.push(num(3 + k)?);
        }
        for k in 0..d_z {
            rows.z.push(num(3 + d_x + k)?);
        }
    }
    if let Some((_, _, rows)) = current {
        clusters.push(rows.into_cluster(d_x, d_z));
    }
    let data = ClusterDataset::new(clusters, d_x, d_z);
    validate_dataset(&data).into_result().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(NamedDataset { data, x_names: numbered(&header, 'x'), z_names: numbered(&header, 'z') })
}

/// Writes a dataset in the input schema, clusters numbered from 1.
pub fn write_dataset<W: Write>(ds: &ClusterDataset, writer: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster".to_string(), "t".into(), "y".into()];
    header.extend((1..=ds.d_x).map(|j| format!("x{j}")));
    header.extend((1..=ds.d_z).map(|j| format!("z{j}")));
    w.write_record(&header)?;
    for (i, c) in ds.clusters.iter().enumerate() {
        for r in 0..c.size() {
            let mut rec = vec![(i + 1).to_string(), (r + 1).to_string(), c.y[r].to_string()];
            rec.extend(c.x.row(r).iter().map(f64::to_string));
            rec.extend(c.z.row(r).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "cluster,t,y,x1,z1,z2\n1,1,0.5,0.2,1,0.3\n1,2,0.1,0.9,1,-1\n2,1,2.0,0.4,1,0\n";

    #[test]
    fn parses_clusters_in_order() {
        let d = read_dataset(GOOD.as_bytes()).unwrap();
        assert_eq!(d.data.cluster_sizes(), vec![2, 1]);
        assert_eq!(d.x_names, vec!["x1"]);
        assert_eq!(d.z_names, vec!["z1", "z2"]);
        assert_eq!(d.data.clusters[0].z[(1, 1)], -1.0);
        assert_eq!(d.data.clusters[1].x[(0, 0)], 0.4);
    }

    #[test]
    fn round_trip_is_exact() {
        let d = read_dataset(GOOD.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d.data, &mut buf).unwrap();
        let e = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(d.data, e.data);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cases = [
            "cluster,t,y,x1\n1,1,0,0.5\n",
            "cluster,t,y,x1,z1\n1,1,0,0.5,2\n",
            "cluster,t,y,x1,z1\n1,1,0,1.5,1\n",
            "cluster,t,y,x1,z1\n1,2,0,0.5,1\n1,1,0,0.5,1\n",
            "cluster,t,y,x1,z1\n1,1,0,0.5,1\n2,1,0,0.5,1\n1,2,0,0.5,1\n",
            "cluster,t,y,x1,z1\n1,1,abc,0.5,1\n",
            "cluster,t,y,z1,x1\n1,1,0,1,0.5\n",
        ];
        for c in cases {
            assert!(matches!(read_dataset(c.as_bytes()), Err(CliError::Input(_))), "{c}");
        }
    }
}
