#![allow(dead_code)]

use ogrit::dtree::{assign_edge_weights, Branch, GoalTree, Models, Node, Schema, Tree, TrainingConfig};
use ogrit::features::Feature;
use ogrit::scene::GoalType;

/// Tree shape: a leaf with its likelihood, or a test `x > threshold` with the
/// node likelihood, the true subtree and the false subtree.
pub enum Shape {
    Leaf(f64),
    Split(Feature, f64, f64, Box<Shape>, Box<Shape>),
}

pub fn leaf(l: f64) -> Shape {
    Shape::Leaf(l)
}

pub fn split(f: Feature, threshold: f64, l: f64, t: Shape, e: Shape) -> Shape {
    Shape::Split(f, threshold, l, Box::new(t), Box::new(e))
}

/// Indicator of `f`; its false branch is where `f` may be tested.
pub fn missing(f: Feature) -> Feature {
    f.indicator().unwrap()
}

pub fn build_tree(shape: &Shape) -> Tree {
    fn rec(s: &Shape, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        let l = match s {
            Shape::Leaf(l) | Shape::Split(_, _, l, _, _) => *l,
        };
        nodes.push(Node {
            branch: None,
            likelihood: l,
            weight_true: None,
            weight_false: None,
            n_g: 0,
            n_ng: 0,
            entropy: 0.0,
            impurity: 0.0,
        });
        if let Shape::Split(f, c, _, t, e) = s {
            let ti = rec(t, nodes);
            let fi = rec(e, nodes);
            nodes[id].branch = Some(Branch {
                feature: f.0,
                threshold: *c,
                true_child: ti,
                false_child: fi,
            });
        }
        id
    }
    let mut nodes = Vec::new();
    rec(shape, &mut nodes);
    let mut tree = Tree { nodes };
    assign_edge_weights(&mut tree);
    tree.check_legality(&Schema::catalog()).expect("hand-built tree respects indicator guards");
    tree
}

pub fn goal_tree(goal_type: GoalType, shape: &Shape) -> GoalTree {
    GoalTree {
        goal_type,
        config: TrainingConfig::default(),
        tree: build_tree(shape),
    }
}

/// Small fixed trees for every goal type used by the built-in propositions.
pub fn hand_models() -> Models {
    let f = Feature::DIST_ONCOMING;
    let v = Feature::SPEED_ONCOMING;
    let speed = Feature::SPEED;
    let straight = split(
        missing(f),
        0.5,
        0.5,
        leaf(0.55),
        split(f, 20.0, 0.45, leaf(0.7), leaf(0.3)),
    );
    let exit_left = split(
        Feature::ANGLE_TO_GOAL,
        0.3,
        0.5,
        leaf(0.8),
        split(missing(v), 0.5, 0.4, leaf(0.4), split(v, 5.0, 0.4, leaf(0.2), leaf(0.6))),
    );
    let enter_right = split(
        missing(speed),
        0.5,
        0.5,
        leaf(0.5),
        split(
            speed,
            1.0,
            0.5,
            leaf(0.65),
            split(missing(f), 0.5, 0.35, leaf(0.25), split(f, 40.0, 0.4, leaf(0.6), leaf(0.2))),
        ),
    );
    let enter_left = split(
        Feature::ANGLE_IN_LANE,
        0.1,
        0.5,
        leaf(0.3),
        split(missing(f), 0.5, 0.6, leaf(0.5), leaf(0.7)),
    );
    let exit_roundabout = split(
        missing(Feature::EXIT_NUMBER),
        0.5,
        0.5,
        split(Feature::PATH_TO_GOAL_LENGTH, 60.0, 0.4, leaf(0.2), leaf(0.45)),
        split(Feature::EXIT_NUMBER, 3.5, 0.55, leaf(0.35), leaf(0.6)),
    );
    let mut m = Models::default();
    for (g, s) in [
        (GoalType::StraightOn, straight),
        (GoalType::ExitLeft, exit_left),
        (GoalType::EnterRight, enter_right),
        (GoalType::EnterLeft, enter_left),
        (GoalType::ExitRoundabout, exit_roundabout),
    ] {
        m.trees.insert(g, goal_tree(g, &s));
    }
    m
}
