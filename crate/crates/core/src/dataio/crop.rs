use crate::error::{MaaError, Result};

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

/// Upper-left, upper-right, bottom-left, bottom-right and center crops of an
/// `height × width` image, each `⌈H/2⌉ × ⌈W/2⌉`.
pub fn five_crop_boxes(height: usize, width: usize) -> Result<[CropBox; 5]> {
    if height < 2 || width < 2 {
        return Err(MaaError::Geometry { height, width });
    }
    let h = height.div_ceil(2);
    let w = width.div_ceil(2);
    let at = |x0: usize, y0: usize| CropBox { x0, y0, x1: x0 + w, y1: y0 + h };
    Ok([
        at(0, 0),
        at(width - w, 0),
        at(0, height - h),
        at(width - w, height - h),
        at((width - w) / 2, (height - h) / 2),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: usize, y0: usize, x1: usize, y1: usize) -> CropBox {
        CropBox { x0, y0, x1, y1 }
    }

    #[test]
    fn square_224() {
        let boxes = five_crop_boxes(224, 224).unwrap();
        assert_eq!(boxes[0], b(0, 0, 112, 112));
        assert_eq!(boxes[1], b(112, 0, 224, 112));
        assert_eq!(boxes[2], b(0, 112, 112, 224));
        assert_eq!(boxes[3], b(112, 112, 224, 224));
        assert_eq!(boxes[4], b(56, 56, 168, 168));
    }

    #[test]
    fn minimal_image() {
        let boxes = five_crop_boxes(2, 2).unwrap();
        assert_eq!(boxes[0], b(0, 0, 1, 1));
        assert_eq!(boxes[1], b(1, 0, 2, 1));
        assert_eq!(boxes[2], b(0, 1, 1, 2));
        assert_eq!(boxes[3], b(1, 1, 2, 2));
        assert_eq!(boxes[4], b(0, 0, 1, 1));
    }

    #[test]
    fn odd_sizes_floor_the_center() {
        let boxes = five_crop_boxes(3, 5).unwrap();
        assert_eq!((boxes[0].height(), boxes[0].width()), (2, 3));
        assert_eq!(boxes[0], b(0, 0, 3, 2));
        assert_eq!(boxes[4], b(1, 0, 4, 2));
    }

    #[test]
    fn too_small_is_an_error() {
        assert!(matches!(five_crop_boxes(1, 10), Err(MaaError::Geometry { .. })));
        assert!(five_crop_boxes(10, 0).is_err());
    }

    proptest! {
        #[test]
        fn boxes_in_bounds_and_corners_cover(h in 2usize..60, w in 2usize..60) {
            let boxes = five_crop_boxes(h, w).unwrap();
            for bx in &boxes {
                prop_assert!(bx.x0 < bx.x1 && bx.x1 <= w);
                prop_assert!(bx.y0 < bx.y1 && bx.y1 <= h);
            }
            for y in 0..h {
                for x in 0..w {
                    prop_assert!(boxes[..4].iter().any(|bx| bx.contains(x, y)));
                }
            }
        }
    }
}
