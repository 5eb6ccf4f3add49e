use crate::error::{Error, Result};

/// Key/value rows of one attention layer, `d` floats per row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

/// Per-layer key/value store with a committed prefix followed by a
/// speculative region.
///
/// Speculative rows carry a parent link (an earlier speculative row, or
/// `None` for a row hanging directly off the committed prefix), so a tree of
/// candidates can be stored flat and later re-packed along one accepted path.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    dim: usize,
    layers: Vec<LayerKv>,
    committed_len: usize,
    spec_parents: Vec<Option<usize>>,
}

impl KvCache {
    pub fn new(num_layers: usize, dim: usize) -> Self {
        Self {
            dim,
            layers: vec![LayerKv::default(); num_layers],
            committed_len: 0,
            spec_parents: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn committed_len(&self) -> usize {
        self.committed_len
    }

    pub fn speculative_len(&self) -> usize {
        self.spec_parents.len()
    }

    pub fn len(&self) -> usize {
        self.committed_len + self.spec_parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, i: usize) -> &LayerKv {
        &self.layers[i]
    }

    /// Number of rows actually stored in layer `i`.
    pub fn stored_rows(&self, i: usize) -> usize {
        self.layers[i].keys.len() / self.dim
    }

    pub fn speculative_parent(&self, i: usize) -> Option<usize> {
        self.spec_parents[i]
    }

    /// Declares new speculative rows before the layers are filled in.
    /// Returns the absolute row index of the first new row.
    pub(crate) fn open_speculative(&mut self, parents: &[Option<usize>]) -> Result<usize> {
        let base = self.spec_parents.len();
        for (i, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= base + i {
                    return Err(Error::Structure(format!(
                        "speculative row {} has parent {p} that is not earlier",
                        base + i
                    )));
                }
            }
        }
        let start = self.len();
        self.spec_parents.extend_from_slice(parents);
        Ok(start)
    }

    pub(crate) fn push_rows(&mut self, layer: usize, keys: &[f32], values: &[f32]) {
        let l = &mut self.layers[layer];
        l.keys.extend_from_slice(keys);
        l.values.extend_from_slice(values);
    }

    /// Absolute row indices visible to speculative row `spec_idx`: the whole
    /// committed prefix, then its speculative ancestors root-first, then
    /// itself.
    pub fn visible_rows(&self, spec_idx: usize) -> Vec<usize> {
        let mut path = vec![spec_idx];
        let mut cur = self.spec_parents[spec_idx];
        while let Some(p) = cur {
            path.push(p);
            cur = self.spec_parents[p];
        }
        let mut out: Vec<usize> = (0..self.committed_len).collect();
        out.extend(path.iter().rev().map(|&s| self.committed_len + s));
        out
    }

    /// Keeps the speculative rows listed in `path` (root-first, each row the
    /// child of the previous one) and discards every other speculative row.
    pub fn commit(&mut self, path: &[usize]) -> Result<()> {
        if path.len() > self.spec_parents.len() {
            return Err(Error::Range(format!(
                "commit of {} rows with only {} speculative",
                path.len(),
                self.spec_parents.len()
            )));
        }
        let mut prev = None;
        for &idx in path {
            if idx >= self.spec_parents.len() {
                return Err(Error::Range(format!("speculative row {idx} does not exist")));
            }
            if self.spec_parents[idx] != prev {
                return Err(Error::Structure(format!(
                    "speculative row {idx} is not a child of {prev:?}"
                )));
            }
            prev = Some(idx);
        }
        let d = self.dim;
        let base = self.committed_len;
        for layer in &mut self.layers {
            for (slot, &idx) in path.iter().enumerate() {
                let src = (base + idx) * d;
                let dst = (base + slot) * d;
                if src != dst {
                    layer.keys.copy_within(src..src + d, dst);
                    layer.values.copy_within(src..src + d, dst);
                }
            }
            layer.keys.truncate((base + path.len()) * d);
            layer.values.truncate((base + path.len()) * d);
        }
        self.committed_len += path.len();
        self.spec_parents.clear();
        Ok(())
    }

    /// Commits the first `n` speculative rows, which must form a chain.
    pub fn commit_prefix(&mut self, n: usize) -> Result<()> {
        let path: Vec<usize> = (0..n).collect();
        self.commit(&path)
    }

    /// Drops every speculative row.
    pub fn rollback(&mut self) {
        let keep = self.committed_len * self.dim;
        for layer in &mut self.layers {
            layer.keys.truncate(keep);
            layer.values.truncate(keep);
        }
        self.spec_parents.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(rows: usize, parents: &[Option<usize>]) -> KvCache {
        let mut c = KvCache::new(2, 2);
        for l in 0..2 {
            let k: Vec<f32> = (0..rows * 2).map(|i| (l * 100 + i) as f32).collect();
            c.push_rows(l, &k, &k);
        }
        c.committed_len = rows - parents.len();
        c.spec_parents = parents.to_vec();
        c
    }

    #[test]
    fn rollback_restores_committed_length() {
        let mut c = filled(5, &[None, Some(0), None]);
        c.rollback();
        assert_eq!(c.committed_len(), 2);
        assert_eq!(c.speculative_len(), 0);
        assert_eq!(c.stored_rows(0), 2);
        assert_eq!(c.stored_rows(1), 2);
    }

    #[test]
    fn commit_zero_equals_rollback() {
        let mut a = filled(5, &[None, Some(0), None]);
        let mut b = a.clone();
        a.commit(&[]).unwrap();
        b.rollback();
        assert_eq!(a, b);
    }

    #[test]
    fn commit_repacks_the_path() {
        // committed: 1 row; speculative: 0:root-child, 1:root-child, 2:child of 1
        let mut c = filled(4, &[None, None, Some(1)]);
        c.commit(&[1, 2]).unwrap();
        assert_eq!(c.committed_len(), 3);
        assert_eq!(c.layer(0).keys, vec![0.0, 1.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(c.layer(1).values, vec![100.0, 101.0, 104.0, 105.0, 106.0, 107.0]);
    }

    #[test]
    fn commit_rejects_bad_paths() {
        let mut c = filled(4, &[None, None, Some(1)]);
        assert!(matches!(c.commit(&[0, 2]), Err(Error::Structure(_))));
        assert!(matches!(c.commit(&[0, 1, 2, 3]), Err(Error::Range(_))));
        assert!(matches!(c.commit_prefix(4), Err(Error::Range(_))));
    }

    #[test]
    fn visibility_follows_ancestry() {
        let c = filled(5, &[None, None, Some(1)]);
        assert_eq!(c.visible_rows(0), vec![0, 1, 2]);
        assert_eq!(c.visible_rows(2), vec![0, 1, 3, 4]);
    }
}
