// From head outputs to a ranked list of moments and a recall table. Token
// t at a level with effective stride S turns its (start, end) offsets
// into the interval (S*(t - d_s), S*(t + d_e)); soft NMS then decays the
// scores of near-duplicates instead of deleting them.

use hieragrounder::decode::{
    make_proposals, recall_at, soft_nms, tiou, GroundTruth, Proposal,
};
use hieragrounder::{Result, Tensor};

fn main() -> Result<()> {
    // one level of 8 tokens at stride 2 over a 16-frame video; only token
    // 4 clears the score floor, offering (2*(4-1), 2*(4+2)) = (6, 12)
    let mut s = vec![0.1; 8];
    s[4] = 0.9;
    let scores = Tensor::from_vec(s, &[8, 1])?;
    let mut d = vec![0.0; 16];
    d[8] = 1.0;
    d[9] = 2.0;
    let offsets = Tensor::from_vec(d, &[8, 2])?;
    let props = make_proposals(&[scores], &[offsets], &[2], 16, 0.5)?;
    for p in &props {
        println!(
            "proposal ({:.1}, {:.1}) score {:.2} from level {} token {}",
            p.t_s, p.t_e, p.score, p.level, p.token
        );
    }

    // two identical intervals: soft NMS keeps both but the weaker one is
    // pushed down by exp(-iou^2 / sigma)
    let pair = vec![
        Proposal { t_s: 0.0, t_e: 4.0, score: 1.0, level: 0, token: 0 },
        Proposal { t_s: 0.0, t_e: 4.0, score: 0.8, level: 0, token: 1 },
    ];
    let kept = soft_nms(&pair, 0.5, 10)?;
    println!("\nafter soft nms: {:.3} and {:.3}", kept[0].score, kept[1].score);

    // recall@k at IoU threshold theta: the share of queries whose top k
    // proposals contain one overlapping the ground truth by at least theta
    let gt = vec![
        GroundTruth { t_start: 6.0, t_end: 12.0 },
        GroundTruth { t_start: 0.0, t_end: 4.0 },
    ];
    let preds = vec![
        props, // hits gt 0 exactly
        vec![Proposal { t_s: 1.0, t_e: 4.0, score: 0.7, level: 0, token: 0 }], // iou 0.75 vs gt 1
    ];
    println!("\niou of (1,4) vs (0,4) = {:.3}", tiou((1.0, 4.0), (0.0, 4.0))?);
    for theta in [0.5, 0.8] {
        println!("recall@1 iou>{theta}: {:.2}", recall_at(&preds, &gt, 1, theta)?);
    }
    Ok(())
}
