//! The 11-class face label palette.

pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const LEFT_BROW: u8 = 2;
pub const RIGHT_BROW: u8 = 3;
pub const LEFT_EYE: u8 = 4;
pub const RIGHT_EYE: u8 = 5;
pub const NOSE: u8 = 6;
pub const UPPER_LIP: u8 = 7;
pub const INNER_MOUTH: u8 = 8;
pub const LOWER_LIP: u8 = 9;
pub const HAIR: u8 = 10;

pub const NUM_CLASSES: usize = 11;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "skin",
    "left_brow",
    "right_brow",
    "left_eye",
    "right_eye",
    "nose",
    "upper_lip",
    "inner_mouth",
    "lower_lip",
    "hair",
];

/// Display colors for overlays and the sidecar palette file.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [255, 204, 153],
    [0, 153, 0],
    [0, 204, 102],
    [51, 102, 255],
    [0, 204, 255],
    [255, 153, 0],
    [204, 0, 51],
    [255, 255, 0],
    [153, 0, 153],
    [102, 51, 0],
];

/// Labels whose union forms the "overall" inner-face score.
pub const INNER_LABELS: [u8; 8] = [
    LEFT_BROW,
    RIGHT_BROW,
    LEFT_EYE,
    RIGHT_EYE,
    NOSE,
    UPPER_LIP,
    INNER_MOUTH,
    LOWER_LIP,
];

pub fn is_inner(label: u8) -> bool {
    (LEFT_BROW..=LOWER_LIP).contains(&label)
}

/// Label seen by the outer head: inner components fold into skin.
pub fn outer_label(label: u8) -> u8 {
    if is_inner(label) {
        SKIN
    } else {
        label
    }
}

/// Left/right swap applied by horizontal mirroring.
pub fn mirror_label(label: u8) -> u8 {
    match label {
        LEFT_BROW => RIGHT_BROW,
        RIGHT_BROW => LEFT_BROW,
        LEFT_EYE => RIGHT_EYE,
        RIGHT_EYE => LEFT_EYE,
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_is_an_involution() {
        for l in 0..NUM_CLASSES as u8 {
            assert_eq!(mirror_label(mirror_label(l)), l);
        }
        assert_eq!(mirror_label(LEFT_EYE), RIGHT_EYE);
    }

    #[test]
    fn inner_labels_fold_to_skin() {
        for l in INNER_LABELS {
            assert!(is_inner(l));
            assert_eq!(outer_label(l), SKIN);
        }
        assert_eq!(outer_label(HAIR), HAIR);
        assert_eq!(outer_label(BACKGROUND), BACKGROUND);
    }
}
