//! External key-value shape memory.
//!
//! A bounded FIFO bank of (image feature, voxel grid) slots. Slots are
//! inserted only for reconstructions the decoder got badly wrong (distance
//! above a threshold), evicting the oldest slot once the bank is full.
//! Retrieval is an exact top-k scan over squared Euclidean key distances;
//! queries against a bank holding fewer than k slots are padded with
//! zero-key, empty-value slots.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{MpcnError, Result};
use crate::voxelcore::{read_binvox, shape_distance, write_binvox, ProbVolume, VoxelGrid};

/// One stored (key, value) pair plus its insertion counter.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot {
    pub key: Array1<f64>,
    pub value: VoxelGrid,
    pub insert_tick: u64,
}

/// Bounded FIFO memory bank. Slots are kept oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    key_dim: usize,
    value_resolution: usize,
    slots: VecDeque<MemorySlot>,
    next_tick: u64,
}

/// One retrieval hit. `slot` is the bank index at retrieval time
/// (stable until the next mutation), `None` for zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub key: Array1<f64>,
    pub value: VoxelGrid,
    pub distance: f64,
    pub slot: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    capacity: usize,
    key_dim: usize,
    value_resolution: usize,
    next_tick: u64,
    ticks: Vec<u64>,
}

const BANK_MAGIC: &[u8; 8] = b"MPCNBNK1";

impl MemoryBank {
    /// Creates an empty bank. `value_resolution` fixes the grid size of both
    /// stored values and the empty padding values.
    pub fn new(capacity: usize, key_dim: usize, value_resolution: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(MpcnError::config("memory capacity must be positive"));
        }
        if key_dim == 0 || value_resolution == 0 {
            return Err(MpcnError::config(
                "memory key dimension and value resolution must be positive",
            ));
        }
        Ok(MemoryBank {
            capacity,
            key_dim,
            value_resolution,
            slots: VecDeque::new(),
            next_tick: 1,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn value_resolution(&self) -> usize {
        self.value_resolution
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> impl Iterator<Item = &MemorySlot> {
        self.slots.iter()
    }

    fn check_pair(&self, key: &Array1<f64>, value: &VoxelGrid) -> Result<()> {
        if key.len() != self.key_dim {
            return Err(MpcnError::shape(format!(
                "memory key has dimension {}, bank is configured for {}",
                key.len(),
                self.key_dim
            )));
        }
        if value.resolution() != self.value_resolution {
            return Err(MpcnError::shape(format!(
                "memory value resolution {} differs from bank's {}",
                value.resolution(),
                self.value_resolution
            )));
        }
        Ok(())
    }

    /// Inserts unconditionally, evicting the oldest slot when full.
    pub fn insert(&mut self, key: Array1<f64>, value: VoxelGrid) -> Result<()> {
        self.check_pair(&key, &value)?;
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(MemorySlot {
            key,
            value,
            insert_tick: self.next_tick,
        });
        self.next_tick += 1;
        Ok(())
    }

    /// Inserts `(key, value)` only when the reconstruction was hard, i.e.
    /// `shape_distance(pred, gt) > delta`. Returns whether it inserted.
    pub fn store_if_hard(
        &mut self,
        key: Array1<f64>,
        value: VoxelGrid,
        pred: &ProbVolume,
        gt: &VoxelGrid,
        delta: f64,
    ) -> Result<bool> {
        self.check_pair(&key, &value)?;
        if shape_distance(pred, gt)? > delta {
            self.insert(key, value)?;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// Clears all slots. Capacity and dimensions are unchanged.
    pub fn flush(&mut self) {
        self.slots.clear();
    }

    /// Current keys as an `m' x d_e` matrix, oldest slot first.
    pub fn keys_matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.slots.len(), self.key_dim));
        for (i, slot) in self.slots.iter().enumerate() {
            out.row_mut(i).assign(&slot.key);
        }
        out
    }

    /// Per-query top-k nearest slots by squared Euclidean key distance,
    /// ascending, ties broken towards the older slot. Queries against fewer
    /// than `k` stored slots are padded with zero-key, empty-value entries
    /// whose reported distance is `+inf`.
    pub fn retrieve(&self, queries: &Array2<f64>, k: usize) -> Result<Vec<Vec<Retrieved>>> {
        if k == 0 {
            return Err(MpcnError::config("retrieval k must be positive"));
        }
        if queries.ncols() != self.key_dim {
            return Err(MpcnError::shape(format!(
                "queries have dimension {}, bank keys have {}",
                queries.ncols(),
                self.key_dim
            )));
        }
        let pad = || Retrieved {
            key: Array1::zeros(self.key_dim),
            value: VoxelGrid::empty(self.value_resolution),
            distance: f64::INFINITY,
            slot: None,
        };
        if self.slots.is_empty() {
            return Ok((0..queries.nrows())
                .map(|_| (0..k).map(|_| pad()).collect())
                .collect());
        }

        let keys = self.keys_matrix();
        let dists = distance_matrix(queries, &keys)?;
        let mut out = Vec::with_capacity(queries.nrows());
        for q in 0..queries.nrows() {
            let row = dists.row(q);
            let mut order: Vec<usize> = (0..self.slots.len()).collect();
            order.sort_by(|&a, &b| {
                row[a]
                    .total_cmp(&row[b])
                    .then(self.slots[a].insert_tick.cmp(&self.slots[b].insert_tick))
            });
            let mut hits: Vec<Retrieved> = order
                .iter()
                .take(k)
                .map(|&i| Retrieved {
                    key: self.slots[i].key.clone(),
                    value: self.slots[i].value.clone(),
                    distance: row[i],
                    slot: Some(i),
                })
                .collect();
            while hits.len() < k {
                hits.push(pad());
            }
            out.push(hits);
        }
        Ok(out)
    }

    /// Serializes the bank: magic, JSON header, raw keys, run-length values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        let header = BankHeader {
            capacity: self.capacity,
            key_dim: self.key_dim,
            value_resolution: self.value_resolution,
            next_tick: self.next_tick,
            ticks: self.slots.iter().map(|s| s.insert_tick).collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| MpcnError::Checkpoint(format!("bank header encode: {e}")))?;
        w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
        w.write_all(&header_bytes)?;
        for slot in &self.slots {
            for &v in slot.key.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        for slot in &self.slots {
            let mut buf = Vec::new();
            write_binvox(&slot.value, &mut buf)?;
            w.write_u64::<LittleEndian>(buf.len() as u64)?;
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`MemoryBank::write_to`].
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| MpcnError::Checkpoint(format!("bank magic: {e}")))?;
        if &magic != BANK_MAGIC {
            return Err(MpcnError::Checkpoint(format!(
                "bad bank magic {magic:?}, expected {BANK_MAGIC:?}"
            )));
        }
        let header_len = r.read_u64::<LittleEndian>()? as usize;
        if header_len > 1 << 24 {
            return Err(MpcnError::Checkpoint(format!(
                "bank header length {header_len} is implausible"
            )));
        }
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: BankHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| MpcnError::Checkpoint(format!("bank header decode: {e}")))?;
        let mut bank = MemoryBank::new(header.capacity, header.key_dim, header.value_resolution)?;
        if header.ticks.len() > header.capacity {
            return Err(MpcnError::Checkpoint(format!(
                "bank holds {} slots, capacity is {}",
                header.ticks.len(),
                header.capacity
            )));
        }
        let mut keys = Vec::with_capacity(header.ticks.len());
        for _ in 0..header.ticks.len() {
            let mut key = Array1::zeros(header.key_dim);
            for v in key.iter_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
            keys.push(key);
        }
        for (key, &tick) in keys.into_iter().zip(&header.ticks) {
            let len = r.read_u64::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let value = read_binvox(&buf[..], "bank slot")?;
            if value.resolution() != header.value_resolution {
                return Err(MpcnError::Checkpoint(format!(
                    "bank slot resolution {} differs from header's {}",
                    value.resolution(),
                    header.value_resolution
                )));
            }
            bank.slots.push_back(MemorySlot {
                key,
                value,
                insert_tick: tick,
            });
        }
        bank.next_tick = header.next_tick;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| MpcnError::Checkpoint(format!("cannot create {}: {e}", path.display())))?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| MpcnError::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Squared Euclidean distances between query rows and key rows:
/// entry (i, j) is `|Q_i|^2 + |K_j|^2 - 2 Q_i . K_j`, clamped below at 0
/// to absorb round-off on near-identical vectors.
pub fn distance_matrix(q: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(MpcnError::shape(format!(
            "distance_matrix inner dimensions differ: {} vs {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let q_norms: Vec<f64> = q.rows().into_iter().map(|r| r.dot(&r)).collect();
    let k_norms: Vec<f64> = k.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut out = Array2::zeros((q.nrows(), k.nrows()));
    for i in 0..q.nrows() {
        let qi = q.row(i);
        for j in 0..k.nrows() {
            let d = q_norms[i] + k_norms[j] - 2.0 * qi.dot(&k.row(j));
            out[[i, j]] = d.max(0.0);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn key_of(rng: &mut impl Rng, d: usize) -> Array1<f64> {
        Array1::from_iter((0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0))
    }

    fn grid_of(rng: &mut impl Rng, r: usize) -> VoxelGrid {
        VoxelGrid::from_fn(r, |_, _, _| rng.random::<f64>() < 0.5)
    }

    /// Insert that always qualifies: pred all-ones vs empty gt has distance 1.
    fn force_insert(bank: &mut MemoryBank, key: Array1<f64>, value: VoxelGrid) {
        let r = bank.value_resolution();
        let pred = ProbVolume::from_raw(r, vec![1.0; r * r * r]).unwrap();
        let gt = VoxelGrid::empty(r);
        assert!(bank.store_if_hard(key, value, &pred, &gt, 0.1).unwrap());
    }

    #[test]
    fn perfect_prediction_is_not_stored() {
        let mut bank = MemoryBank::new(4, 3, 2).unwrap();
        let gt = VoxelGrid::from_fn(2, |x, _, _| x == 0);
        let inserted = bank
            .store_if_hard(array![1.0, 2.0, 3.0], gt.clone(), &gt.to_prob(), &gt, 0.1)
            .unwrap();
        assert!(!inserted);
        assert!(bank.is_empty());
    }

    #[test]
    fn hard_prediction_is_stored() {
        // 10^3 grid with pred and gt differing on exactly 200 voxels:
        // distance 200/1000 = 0.2 > 0.1.
        let gt = VoxelGrid::empty(10);
        let pred_grid = VoxelGrid::from_fn(10, |x, y, z| x < 2 && y < 10 && z < 10);
        assert_eq!(pred_grid.occupied_count(), 200);
        let d = shape_distance(&pred_grid.to_prob(), &gt).unwrap();
        assert!((d - 0.2).abs() < 1e-15);

        let mut bank = MemoryBank::new(4, 2, 10).unwrap();
        let inserted = bank
            .store_if_hard(array![0.5, 0.5], gt.clone(), &pred_grid.to_prob(), &gt, 0.1)
            .unwrap();
        assert!(inserted);
        assert_eq!(bank.len(), 1);
    }

    #[test]
    fn threshold_is_strict() {
        // Distance exactly delta must not insert.
        let gt = VoxelGrid::empty(10);
        let pred_grid = VoxelGrid::from_fn(10, |x, y, _| x == 0 && y == 0);
        let pred = pred_grid.to_prob();
        let d = shape_distance(&pred, &gt).unwrap();
        let mut bank = MemoryBank::new(4, 1, 10).unwrap();
        assert!(!bank.store_if_hard(array![1.0], gt.clone(), &pred, &gt, d).unwrap());
    }

    #[test]
    fn fifo_evicts_oldest() {
        let mut rng = crate::test_rng(3);
        let mut bank = MemoryBank::new(3, 2, 2).unwrap();
        for _ in 0..3 {
            let (k, v) = (key_of(&mut rng, 2), grid_of(&mut rng, 2));
            force_insert(&mut bank, k, v);
        }
        let ticks: Vec<u64> = bank.slots().map(|s| s.insert_tick).collect();
        assert_eq!(ticks, vec![1, 2, 3]);

        let (k, v) = (key_of(&mut rng, 2), grid_of(&mut rng, 2));
        force_insert(&mut bank, k, v);
        let ticks: Vec<u64> = bank.slots().map(|s| s.insert_tick).collect();
        assert_eq!(ticks, vec![2, 3, 4]);
    }

    #[test]
    fn flush_clears_and_is_idempotent() {
        let mut rng = crate::test_rng(5);
        let mut bank = MemoryBank::new(3, 2, 2).unwrap();
        force_insert(&mut bank, key_of(&mut rng, 2), grid_of(&mut rng, 2));
        bank.flush();
        assert_eq!(bank.len(), 0);
        assert_eq!(bank.capacity(), 3);
        assert_eq!(bank.key_dim(), 2);
        let after_once = bank.clone();
        bank.flush();
        assert_eq!(bank, after_once);

        // Fresh-bank behavior after flush.
        force_insert(&mut bank, array![0.0, 1.0], grid_of(&mut rng, 2));
        assert_eq!(bank.len(), 1);
    }

    #[test]
    fn distance_matrix_identity_and_units() {
        let q = array![[1.0, 0.0]];
        assert_eq!(distance_matrix(&q, &q).unwrap(), array![[0.0]]);
        let k = array![[0.0, 1.0]];
        assert_eq!(distance_matrix(&q, &k).unwrap(), array![[2.0]]);
    }

    #[test]
    fn distance_matrix_matches_pairwise_oracle() {
        let mut rng = crate::test_rng(7);
        let q = Array2::from_shape_fn((4, 8), |_| rng.random::<f64>() * 4.0 - 2.0);
        let k = Array2::from_shape_fn((6, 8), |_| rng.random::<f64>() * 4.0 - 2.0);
        let got = distance_matrix(&q, &k).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut acc = 0.0;
                for c in 0..8 {
                    let d = q[[i, c]] - k[[j, c]];
                    acc += d * d;
                }
                let rel = (got[[i, j]] - acc).abs() / acc.max(1e-30);
                assert!(rel < 1e-5, "entry ({i},{j}): got {} want {acc}", got[[i, j]]);
                assert!(got[[i, j]] >= 0.0);
            }
        }
    }

    #[test]
    fn distance_matrix_rejects_mismatch() {
        let q = Array2::<f64>::zeros((2, 3));
        let k = Array2::<f64>::zeros((2, 4));
        assert!(distance_matrix(&q, &k).is_err());
    }

    #[test]
    fn retrieve_from_empty_bank_pads() {
        let bank = MemoryBank::new(10, 4, 2).unwrap();
        let q = Array2::<f64>::zeros((2, 4));
        let hits = bank.retrieve(&q, 5).unwrap();
        assert_eq!(hits.len(), 2);
        for per_query in &hits {
            assert_eq!(per_query.len(), 5);
            for h in per_query {
                assert_eq!(h.key, Array1::<f64>::zeros(4));
                assert_eq!(h.value, VoxelGrid::empty(2));
                assert_eq!(h.distance, f64::INFINITY);
                assert_eq!(h.slot, None);
            }
        }
    }

    #[test]
    fn retrieve_partial_bank_pads_remainder() {
        let mut rng = crate::test_rng(9);
        let mut bank = MemoryBank::new(10, 4, 2).unwrap();
        for _ in 0..3 {
            force_insert(&mut bank, key_of(&mut rng, 4), grid_of(&mut rng, 2));
        }
        let q = Array2::from_shape_fn((1, 4), |_| rng.random::<f64>());
        let hits = &bank.retrieve(&q, 5).unwrap()[0];
        assert_eq!(hits.len(), 5);
        assert!(hits[..3].iter().all(|h| h.slot.is_some()));
        assert!(hits[0].distance <= hits[1].distance);
        assert!(hits[1].distance <= hits[2].distance);
        assert!(hits[3..].iter().all(|h| h.slot.is_none()));
    }

    #[test]
    fn retrieve_matches_full_sort_oracle() {
        let mut rng = crate::test_rng(11);
        let mut bank = MemoryBank::new(64, 6, 2).unwrap();
        for _ in 0..50 {
            force_insert(&mut bank, key_of(&mut rng, 6), grid_of(&mut rng, 2));
        }
        let q = Array2::from_shape_fn((8, 6), |_| rng.random::<f64>() * 2.0 - 1.0);
        let hits = bank.retrieve(&q, 5).unwrap();
        let keys = bank.keys_matrix();
        for (qi, per_query) in hits.iter().enumerate() {
            // Brute force: compute every distance, sort all slots, keep 5.
            let mut all: Vec<(f64, usize)> = (0..50)
                .map(|s| {
                    let mut acc = 0.0;
                    for c in 0..6 {
                        let d = q[[qi, c]] - keys[[s, c]];
                        acc += d * d;
                    }
                    (acc, s)
                })
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..5].iter().map(|&(_, s)| s).collect();
            let got: Vec<usize> = per_query.iter().map(|h| h.slot.unwrap()).collect();
            assert_eq!(got, want, "query {qi}");
        }
    }

    #[test]
    fn retrieve_breaks_ties_towards_older_slot() {
        let mut bank = MemoryBank::new(4, 2, 2).unwrap();
        let same = array![0.5, -0.5];
        let a = VoxelGrid::from_fn(2, |x, _, _| x == 0);
        let b = VoxelGrid::from_fn(2, |x, _, _| x == 1);
        force_insert(&mut bank, same.clone(), a.clone());
        force_insert(&mut bank, same.clone(), b);
        let q = same.clone().insert_axis(ndarray::Axis(0));
        let hits = &bank.retrieve(&q, 1).unwrap()[0];
        assert_eq!(hits[0].slot, Some(0));
        assert_eq!(hits[0].value, a);
    }

    #[test]
    fn retrieve_does_not_mutate() {
        let mut rng = crate::test_rng(13);
        let mut bank = MemoryBank::new(8, 3, 2).unwrap();
        for _ in 0..4 {
            force_insert(&mut bank, key_of(&mut rng, 3), grid_of(&mut rng, 2));
        }
        let before = bank.clone();
        let q = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>());
        let first = bank.retrieve(&q, 5).unwrap();
        let second = bank.retrieve(&q, 5).unwrap();
        assert_eq!(first, second);
        assert_eq!(bank, before);
    }

    #[test]
    fn rejects_dimension_mismatches() {
        let mut bank = MemoryBank::new(4, 3, 2).unwrap();
        let gt = VoxelGrid::empty(2);
        let pred = ProbVolume::from_raw(2, vec![1.0; 8]).unwrap();
        assert!(bank
            .store_if_hard(array![1.0], gt.clone(), &pred, &gt, 0.1)
            .is_err());
        let wrong_res = VoxelGrid::empty(3);
        assert!(bank
            .store_if_hard(array![1.0, 2.0, 3.0], wrong_res, &pred, &gt, 0.1)
            .is_err());
        assert!(bank.retrieve(&Array2::zeros((1, 2)), 5).is_err());
        assert!(bank.retrieve(&Array2::zeros((1, 3)), 0).is_err());
        assert!(MemoryBank::new(0, 3, 2).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = crate::test_rng(17);
        let mut bank = MemoryBank::new(8, 5, 4).unwrap();
        for _ in 0..6 {
            force_insert(&mut bank, key_of(&mut rng, 5), grid_of(&mut rng, 4));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.mem");
        bank.save(&path).unwrap();
        let back = MemoryBank::load(&path).unwrap();
        assert_eq!(back, bank);

        // Ticks keep increasing from the restored counter.
        let mut restored = back;
        force_insert(&mut restored, key_of(&mut rng, 5), grid_of(&mut rng, 4));
        assert_eq!(restored.slots().last().unwrap().insert_tick, 7);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let err = MemoryBank::read_from(&b"NOTABANKxxxx"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Random insert/flush sequences: capacity holds and survivors are
        /// exactly the largest ticks.
        #[test]
        fn capacity_and_fifo_hold(ops in proptest::collection::vec(0u8..12, 1..120)) {
            let mut bank = MemoryBank::new(5, 2, 2).unwrap();
            let mut issued: Vec<u64> = Vec::new();
            let mut last_flush_at = 0usize;
            for &op in &ops {
                if op == 11 {
                    bank.flush();
                    last_flush_at = issued.len();
                } else {
                    let key = array![op as f64, -(op as f64)];
                    let value = VoxelGrid::from_fn(2, |x, _, _| x == (op % 2) as usize);
                    force_insert(&mut bank, key, value);
                    issued.push(issued.len() as u64 + 1);
                }
                prop_assert!(bank.len() <= 5);
                let since_flush = issued.len() - last_flush_at;
                prop_assert_eq!(bank.len(), since_flush.min(5));
                let ticks: Vec<u64> = bank.slots().map(|s| s.insert_tick).collect();
                let expect: Vec<u64> = issued[last_flush_at + since_flush.saturating_sub(5)..]
                    .to_vec();
                prop_assert_eq!(ticks, expect);
            }
        }

        /// distance_matrix is non-negative and matches the naive loop.
        #[test]
        fn distance_matrix_oracle_prop(
            q_raw in proptest::collection::vec(-10.0f64..10.0, 12),
            k_raw in proptest::collection::vec(-10.0f64..10.0, 20),
        ) {
            let q = Array2::from_shape_vec((3, 4), q_raw).unwrap();
            let k = Array2::from_shape_vec((5, 4), k_raw).unwrap();
            let got = distance_matrix(&q, &k).unwrap();
            for i in 0..3 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for c in 0..4 {
                        let d = q[[i, c]] - k[[j, c]];
                        acc += d * d;
                    }
                    prop_assert!(got[[i, j]] >= 0.0);
                    let tol = 1e-5 * acc.max(1.0);
                    prop_assert!((got[[i, j]] - acc).abs() <= tol);
                }
            }
        }
    }
}
