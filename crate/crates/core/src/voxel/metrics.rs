use super::{VoxelError, VoxelGrid, EMPTY};

fn check(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<(), VoxelError> {
    if pred.dims() != gt.dims() {
        return Err(VoxelError::DimMismatch(pred.dims(), gt.dims()));
    }
    Ok(())
}

/// Occupancy IoU, every non-empty class counting as occupied. Two empty
/// grids score 1.
pub fn iou(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64, VoxelError> {
    check(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p != EMPTY, g != EMPTY);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU of every non-empty class, `None` where the class is absent from both.
pub fn per_class_iou(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<Vec<Option<f64>>, VoxelError> {
    check(pred, gt)?;
    if pred.num_classes() != gt.num_classes() {
        return Err(VoxelError::ClassMismatch(pred.num_classes(), gt.num_classes()));
    }
    let mut acc = IouAccumulator::new(gt.num_classes());
    acc.add(pred, gt)?;
    Ok(acc.per_class())
}

/// Mean of per-class IoU over classes present in either grid; 1 when neither
/// grid has any non-empty voxel.
pub fn miou(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64, VoxelError> {
    let per = per_class_iou(pred, gt)?;
    Ok(mean_present(&per))
}

fn mean_present(per: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Intersection/union counts pooled over many scene pairs.
#[derive(Clone, Debug)]
pub struct IouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: u16) -> Self {
        Self { inter: vec![0; num_classes as usize], union: vec![0; num_classes as usize] }
    }

    pub fn add(&mut self, pred: &VoxelGrid, gt: &VoxelGrid) -> Result<(), VoxelError> {
        check(pred, gt)?;
        let n = self.inter.len() as u16;
        if pred.num_classes() != n || gt.num_classes() != n {
            return Err(VoxelError::ClassMismatch(pred.num_classes(), n));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if p == g {
                self.inter[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[g as usize] += 1;
            }
        }
        Ok(())
    }

    /// Pooled IoU per class; entry 0 (empty) is always `None`.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.inter
            .iter()
            .zip(&self.union)
            .enumerate()
            .map(|(c, (&i, &u))| (c != EMPTY as usize && u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self) -> f64 {
        mean_present(&self.per_class())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(labels: Vec<u16>, n: u16) -> VoxelGrid {
        VoxelGrid::new([labels.len(), 1, 1], n, labels).unwrap()
    }

    #[test]
    fn hand_counted_occupancy_iou() {
        let pred = grid(vec![1, 1, 0, 0], 2);
        let gt = grid(vec![0, 1, 1, 0], 2);
        assert!((iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_hit_one_miss_is_half() {
        let pred = grid(vec![1, 1, 0, 0], 3);
        let gt = grid(vec![1, 1, 2, 2], 3);
        assert_eq!(miou(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn empty_grids_score_one() {
        let g = grid(vec![0; 5], 4);
        assert_eq!(iou(&g, &g).unwrap(), 1.0);
        assert_eq!(miou(&g, &g).unwrap(), 1.0);
    }

    #[test]
    fn dim_mismatch() {
        let a = grid(vec![0; 4], 2);
        let b = grid(vec![0; 5], 2);
        assert!(matches!(iou(&a, &b), Err(VoxelError::DimMismatch(..))));
    }
}
