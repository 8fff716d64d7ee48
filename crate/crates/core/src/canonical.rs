//! The canonical 36-joint humanoid skeleton: 108 pose parameters that
//! partition into the seven body-part groups
//! (torso+head 12, legs 9+9, arms 12+12, hands 27+27).

use std::collections::BTreeMap;

use nalgebra::Isometry3;

use crate::skeleton::{Joint, Skeleton};

pub const GROUP_NAMES: [&str; 7] = [
    "torso_head",
    "left_leg",
    "right_leg",
    "left_arm",
    "right_arm",
    "left_hand",
    "right_hand",
];

/// Builds the canonical humanoid: T-pose, meters, y up, pelvis at y=1.
pub fn canonical_humanoid() -> Skeleton {
    let j = |name: &str, parent: Option<usize>, t: [f64; 3]| Joint {
        name: name.into(),
        parent,
        rest: Isometry3::translation(t[0], t[1], t[2]),
    };
    let mut joints = vec![
        j("pelvis", None, [0.0, 1.0, 0.0]),
        j("spine", Some(0), [0.0, 0.25, 0.0]),
        j("neck", Some(1), [0.0, 0.22, 0.0]),
        j("head", Some(2), [0.0, 0.08, 0.0]),
        j("l_hip", Some(0), [0.10, -0.04, 0.0]),
        j("l_knee", Some(4), [0.0, -0.42, 0.0]),
        j("l_ankle", Some(5), [0.0, -0.40, 0.0]),
        j("r_hip", Some(0), [-0.10, -0.04, 0.0]),
        j("r_knee", Some(7), [0.0, -0.42, 0.0]),
        j("r_ankle", Some(8), [0.0, -0.40, 0.0]),
        j("l_clavicle", Some(1), [0.05, 0.18, 0.0]),
        j("l_shoulder", Some(10), [0.14, 0.0, 0.0]),
        j("l_elbow", Some(11), [0.26, 0.0, 0.0]),
        j("l_wrist", Some(12), [0.24, 0.0, 0.0]),
    ];
    // left fingers: 3 fingers x 3 segments hanging off the wrist
    let finger_offsets = [0.02, 0.0, -0.02];
    for (f, &z) in finger_offsets.iter().enumerate() {
        let base = joints.len();
        joints.push(j(&format!("l_finger{}_a", f), Some(13), [0.05, 0.0, z]));
        joints.push(j(&format!("l_finger{}_b", f), Some(base), [0.032, 0.0, 0.0]));
        joints.push(j(&format!("l_finger{}_c", f), Some(base + 1), [0.026, 0.0, 0.0]));
    }
    joints.push(j("r_clavicle", Some(1), [-0.05, 0.18, 0.0]));
    joints.push(j("r_shoulder", Some(23), [-0.14, 0.0, 0.0]));
    joints.push(j("r_elbow", Some(24), [-0.26, 0.0, 0.0]));
    joints.push(j("r_wrist", Some(25), [-0.24, 0.0, 0.0]));
    for (f, &z) in finger_offsets.iter().enumerate() {
        let base = joints.len();
        joints.push(j(&format!("r_finger{}_a", f), Some(26), [-0.05, 0.0, z]));
        joints.push(j(&format!("r_finger{}_b", f), Some(base), [-0.032, 0.0, 0.0]));
        joints.push(j(&format!("r_finger{}_c", f), Some(base + 1), [-0.026, 0.0, 0.0]));
    }
    debug_assert_eq!(joints.len(), 36);

    let mut groups = BTreeMap::new();
    groups.insert("torso_head".into(), vec![0, 1, 2, 3]);
    groups.insert("left_leg".into(), vec![4, 5, 6]);
    groups.insert("right_leg".into(), vec![7, 8, 9]);
    groups.insert("left_arm".into(), vec![10, 11, 12, 13]);
    groups.insert("right_arm".into(), vec![23, 24, 25, 26]);
    groups.insert("left_hand".into(), (14..=22).collect());
    groups.insert("right_hand".into(), (27..=35).collect());

    Skeleton { joints, groups }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_partition_matches_group_arithmetic() {
        let sk = canonical_humanoid();
        sk.validate().unwrap();
        assert_eq!(sk.joints.len(), 36);
        assert_eq!(sk.param_count(), 108);
        let sizes: Vec<usize> = GROUP_NAMES
            .iter()
            .map(|n| sk.groups[*n].len() * 3)
            .collect();
        assert_eq!(sizes, vec![12, 9, 9, 12, 12, 27, 27]);
        // the groups partition all joints exactly
        let mut seen = vec![false; 36];
        for idxs in sk.groups.values() {
            for &i in idxs {
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn wrists_are_found_for_hand_groups() {
        let sk = canonical_humanoid();
        let lw = sk.wrist_of(&sk.groups["left_hand"]).unwrap();
        let rw = sk.wrist_of(&sk.groups["right_hand"]).unwrap();
        assert_eq!(sk.joints[lw].name, "l_wrist");
        assert_eq!(sk.joints[rw].name, "r_wrist");
    }
}
