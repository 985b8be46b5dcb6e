#![allow(dead_code)]

use idsqs_core::domain::{Codec, Question, QuestionKind, Rating, RatingTable, Stimulus};

/// Question `j` of a matrix fixture: two sources, levels 0..=per_source-1.
pub fn matrix_question(j: usize, per_source: usize) -> Question {
    let source = format!("src{}", j / per_source);
    let level = (j % per_source) as u8;
    let test = if level == 0 {
        Stimulus::pristine(source)
    } else {
        Stimulus::new(source, Codec::Jpeg, level).unwrap()
    };
    Question::new(format!("q{j:03}"), QuestionKind::Study, test).unwrap()
}

/// Full subject × question table from a score matrix (rows are subjects).
pub fn matrix_table(scores: &[Vec<f64>], per_source: usize) -> RatingTable {
    let n_questions = scores[0].len();
    let questions: Vec<Question> = (0..n_questions)
        .map(|j| matrix_question(j, per_source))
        .collect();
    let mut ratings = Vec::new();
    for (i, row) in scores.iter().enumerate() {
        for (j, &score) in row.iter().enumerate() {
            ratings.push(Rating {
                subject_id: format!("p{i:03}"),
                batch_instance_id: format!("p{i:03}-b0"),
                batch_id: "b0".into(),
                question_id: format!("q{j:03}"),
                score,
                toggle_count: 0,
                elapsed_ms: 0,
                timestamp: 0,
            });
        }
    }
    RatingTable::new(questions, ratings).unwrap()
}

/// Rank of each value counting ties as the mean of their positions (1-based),
/// by direct counting.
pub fn naive_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Tau-b by enumerating every pair.
pub fn naive_kendall(x: &[f64], y: &[f64]) -> f64 {
    let (mut concordant, mut discordant, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tx += 1;
            } else if dy == 0.0 {
                ty += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n1 = (concordant + discordant + tx) as f64;
    let n2 = (concordant + discordant + ty) as f64;
    (concordant - discordant) as f64 / (n1 * n2).sqrt()
}
