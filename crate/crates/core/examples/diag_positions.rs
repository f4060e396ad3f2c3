// Ad-hoc diagnostic: per-position cross-entropy on dev instances.
use kvfuse_core::data::*;
use kvfuse_core::fusion::*;
use kvfuse_core::model::*;
use kvfuse_core::rng::derive_seed;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let data_path = &args[2];
    let d_t = load_model_file(ckpt).unwrap();
    let mut d_p = Model::init(d_t.config.clone(), derive_seed(42, "model/init")).unwrap();
    d_p.freeze();
    let data = load_jsonl(data_path).unwrap();
    let tok = Tokenizer::new();
    let n = 64usize;

    // Aggregate loss by labeled region of the target.
    let mut region_loss: std::collections::BTreeMap<&str, (f64, usize)> = Default::default();
    let mut count = 0;
    for inst in data.iter().filter(|i| i.gold.is_some()).take(40) {
        let batch = PassageBatch::from_passages(&inst.gold_first(), &tok, n).unwrap();
        let caches = prefill(&d_p, &batch).unwrap();
        let order: Vec<usize> = (0..batch.n_passages).collect();
        let fused = res_fuse(&caches, &order).unwrap();
        let (q, y) = format_target(&inst.question, &inst.answer, Some(&inst.evidence), &tok);
        let all: Vec<u32> = q.iter().chain(&y).copied().collect();
        let logits = fused_forward(&d_t, &fused, &all).unwrap();
        let vocab = d_t.config.vocab_size;
        // classify each y position
        let ans_len = inst.answer.len();
        for (j, &target) in y.iter().enumerate() {
            let pos = q.len() - 1 + j; // position predicting y[j]
            let row = &logits.data()[pos * vocab..(pos + 1) * vocab];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| ((v as f64) - max).exp()).sum();
            let nll = max + z.ln() - row[target as usize] as f64;
            let region = if j == 0 { "space" }
                else if j >= 1 && j < 1 + ans_len { "ANSWER-digits" }
                else if j < 1 + ans_len + 1 { "space2" }
                else if y[j] == Tokenizer::RESULT || y[j] == Tokenizer::END || y[j] == Tokenizer::EOS { "markers" }
                else {
                    // evidence region: digits vs letters vs template
                    let t = y[j];
                    if (48..=57).contains(&t) { "EVIDENCE-digits" }
                    else { "evidence-other" }
                };
            let e = region_loss.entry(region).or_insert((0.0, 0));
            e.0 += nll;
            e.1 += 1;
        }
        count += 1;
    }
    println!("instances: {count}");
    for (region, (total, cnt)) in region_loss {
        println!("{region:>16}: mean nll {:.3} over {cnt} tokens", total / cnt as f64);
    }
}
