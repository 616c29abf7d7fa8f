//! Parse a small PopQA-style TSV, grade a few predictions and split by popularity.

use abstain::dataset::{
    match_answer, normalize_answer, parse_dataset, popularity_terciles, DatasetFormat,
};

const TSV: &str = "id\tquestion\tpossible_answers\to_pop
1\tWhat is George Rankin's occupation?\t[\"politician\", \"political leader\"]\t142
2\tIn what city was Marie Curie born?\t[\"Warsaw\"]\t58210
3\tWho was the director of Alien?\t[\"Ridley Scott\", \"Sir Ridley Scott\"]\t91044
4\tWhat genre is Lorna Doone?\t[\"novel\", \"historical novel\"]\t2210
5\tWhat is the capital of Gelderland?\t[\"Arnhem\"]\t6603
6\tWho was the producer of Titanic?\t[\"James Cameron\", \"Jon Landau\"]\t120500
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let set = parse_dataset(TSV, DatasetFormat::PopqaTsv, "inline")?;
    println!("{} questions", set.len());

    let predictions = [
        ("1", "He was a Politician."),
        ("2", "warsaw, poland"),
        ("3", "Steven Spielberg"),
        ("4", "a historical novel"),
        ("5", "Arnhem"),
        ("6", "James Cameron"),
    ];
    for (id, pred) in predictions {
        let q = set.get(id).expect("known id");
        let ok = match_answer(pred, &q.references)?;
        println!(
            "{id}: {pred:?} -> {:?} {}",
            normalize_answer(pred),
            if ok { "correct" } else { "wrong" }
        );
    }

    let t = popularity_terciles(&set)?;
    println!(
        "common {:?}\nmiddle {:?}\nrare   {:?}",
        t.common, t.middle, t.rare
    );
    Ok(())
}
